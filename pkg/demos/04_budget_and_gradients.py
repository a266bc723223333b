"""Parameter / FLOP accounting for the presets and a finite-difference check
of the hand-written backward passes.
"""
from omniepi.budget import format_report
from omniepi.cli import gradcheck_suite
from omniepi.model import preset

# FLOPs are 2 x multiply-accumulates of convolutions and matrix products only
for name in ("gtf_tiny", "gtf"):
    print(f"== {name}")
    print(format_report(preset(name), 32, 32))
    print()

# central differences in float64 against the analytic gradients
print("relative gradient error per module (nano, seed 0):")
for name, err in gradcheck_suite(preset("nano"), 0):
    print(f"  {name:<20s} {err:.1e}")
