"""Print the analytic FLOP breakdown and CAA overhead for the toy and desk configurations."""

from context_forge.flops import caa_overhead, flop_breakdown, flop_estimate
from context_forge.model import DESK_CONFIG, TOY_CONFIG


def main():
    for name, cfg in (("toy", TOY_CONFIG), ("desk", DESK_CONFIG)):
        print(f"{name}: {flop_estimate(cfg, True) / 1e9:.3f} GFLOPs with CAA, "
              f"{flop_estimate(cfg, False) / 1e9:.3f} without (+{100 * caa_overhead(cfg):.2f}%)")
        for part, v in flop_breakdown(cfg).items():
            print(f"  {part:15s} {v / 1e6:10.2f} MFLOPs")


if __name__ == "__main__":
    main()
