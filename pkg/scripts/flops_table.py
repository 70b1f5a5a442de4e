"""Forward-pass cost of every model kind under both attention head-width modes."""

import argparse

from ecg_tamperlab.models import FLOPS_CONVENTION, ModelKind, flops_for

REFERENCE_MFLOPS = {"CNN": 288, "ResNet": 728, "TranDeepFFN": 4646, "TranCNNFFN": 3926,
                    "FeatCNNTran": 4277, "FeatCNNTranCNN": 4244, "CWTFeatCNNTran": 2179}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    print(f"{'model':22s} {'input':>8s} {'literal':>10s} {'conventional':>13s} {'reference':>10s}")
    for kind in ModelKind:
        lit = flops_for(kind, args.scale, "literal")
        conv = flops_for(kind, args.scale, "conventional")
        ref = REFERENCE_MFLOPS.get(kind.value)
        shape = "×".join(map(str, lit.input_shape))
        print(f"{kind.value:22s} {shape:>8s} {lit.total_flops / 1e6:10.1f} {conv.total_flops / 1e6:13.1f} "
              f"{ref if ref is not None else '-':>10}")
    print(f"# MFLOPs per forward pass (Siamese: one branch); {FLOPS_CONVENTION}")


if __name__ == "__main__":
    main()
