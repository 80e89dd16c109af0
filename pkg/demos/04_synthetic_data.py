"""A look at the synthetic referring expressions and their masks."""
from icipnet.synthdata import generate

for s in generate(3, seed=4):
    print(repr(s.meta["expression"]), "->", s.category, f"({int(s.mask.sum())} pixels)")
    cells = s.mask[::4, ::4]
    for row in cells[::2]:
        print("   ", "".join("#" if v else "." for v in row))
    print()
