"""Train the detox-world heads for one seed and print guided continuations.

    python scripts/guided_samples.py --seed 0 --betas 0 10 100 --prompts 4
"""
import argparse

import numpy as np

from rankward.decoding import BigramLm, GuidanceConfig, continuation_tokens, generate
from rankward.expcli.config import config_from_dict
from rankward.expcli.experiments import detox_run
from rankward.tasks import make_prompts


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--betas", type=float, nargs="+", default=[0.0, 10.0, 100.0])
    ap.add_argument("--prompts", type=int, default=4)
    ap.add_argument("--top-k", type=int, default=20)
    args = ap.parse_args()
    cfg = config_from_dict({"kind": "tradeoff"})
    run = detox_run(cfg, args.seed)
    world = run.world
    base = BigramLm.from_process(world.process)
    ps = make_prompts(world.process, world.oracle, args.prompts, cfg.detox.prompt_length, args.seed + 5)
    print(f"bad tokens: {world.bad_tokens}")
    for i, prompt in enumerate(ps.prompts):
        print(f"\nprompt {prompt} ({ps.groups[i]} attribute third)")
        for head, model in (("V", run.teacher), ("Q distilled", run.student)):
            for beta in args.betas:
                g = GuidanceConfig(beta=beta, top_k=args.top_k, seed=args.seed)
                rec = generate(base, model, g, prompt, np.random.default_rng([args.seed, i]))
                toks = continuation_tokens(rec)
                score = world.oracle.attribute(toks)
                print(f"  {head:<12} beta={beta:<6g} attr={score:.3f}  {' '.join(map(str, toks))}")


if __name__ == "__main__":
    main()
