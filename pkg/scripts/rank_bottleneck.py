"""Row rank of sampled reward matrices for a random V-style and Q-style head.

The Q-style rows are ``h(x) @ W @ E`` and never exceed rank ``d``; the V-style
rows keep growing with the number of contexts.

    python scripts/rank_bottleneck.py --dim 8 --vocab 64
"""
import argparse

import numpy as np

from rankward import matcore as mc
from rankward.models import QRewardModel, VRewardModel


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--vocab", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    q = QRewardModel.init(args.vocab, args.dim, seed=args.seed)
    q.head.interaction[...] = rng.standard_normal(q.head.interaction.shape)
    v = VRewardModel.init(args.vocab, args.dim, seed=args.seed)
    contexts = [tuple(int(t) for t in rng.integers(1, args.vocab, int(rng.integers(1, 8)))) for _ in range(args.vocab)]
    sizes = [n for n in (2, 4, 8, 16, 32, 64) if n <= len(contexts)]
    qr = mc.row_sample_rank(lambda c: q.score_all(c)[0], contexts, sizes)
    vr = mc.row_sample_rank(v.score_row, contexts, sizes)
    print(f"{'contexts':>9}{'V rank':>8}{'Q rank':>8}   (d = {args.dim})")
    for (n, a), (_, b) in zip(vr, qr):
        print(f"{n:>9}{a:>8}{b:>8}")


if __name__ == "__main__":
    main()
