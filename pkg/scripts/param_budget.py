"""Parameter counts per component for the full-size extractor under each clue set."""
import argparse

from roomtse.dataset import CLUE_SETS
from roomtse.model import DistanceTSE, ModelConfig, count_parameters


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--clue-embed-dim", type=int, default=ModelConfig.clue_embed_dim)
    args = p.parse_args()
    for clue_set in CLUE_SETS:
        model = DistanceTSE(ModelConfig(clue_set=clue_set, clue_embed_dim=args.clue_embed_dim))
        total = count_parameters(model)
        print(f"{clue_set:<12} {total:>10,}  ({total / 1.29e6 - 1:+.1%} vs 1.29M)")
    model = DistanceTSE(ModelConfig(clue_embed_dim=args.clue_embed_dim))
    print()
    for name, child in model.named_children():
        print(f"  {name:<10} {count_parameters(child):>10,}")
    qb = model.blocks[0]
    print(f"  one query block: {count_parameters(qb):,} (of which QEGs {count_parameters(qb.qeg_subband) * 2:,})")


if __name__ == "__main__":
    main()
