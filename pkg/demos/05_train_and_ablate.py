"""Overfit a 16-sample set, then compare fusion variants on a short budget.

Takes under a minute on one core.
"""
from icipnet.experiments import ablate, evaluate_model
from icipnet.pipeline import ICIPNet, ModelConfig
from icipnet.synthdata import generate
from icipnet.training import LossConfig, OptimConfig, TrainConfig, train

data = generate(16, seed=0)
cfg = ModelConfig()

model = ICIPNet(cfg)
history = train(data, model, OptimConfig(lr=1e-3, total_steps=300), LossConfig(), TrainConfig(300, 4))
print(f"loss {history.losses[0]:.4f} -> {history.losses[-1]:.6f}")
report = evaluate_model(model, data)
print(f"training mIoU {report.mIoU:.4f}, oIoU {report.oIoU:.4f}")

for r in ablate(cfg, data, OptimConfig(lr=1e-3, total_steps=60), TrainConfig(60, 4)):
    print(f"{r.label:18s} loss {r.initial_loss:.3f} -> {r.final_loss:.3f}  mIoU {r.report.mIoU:.3f}")
