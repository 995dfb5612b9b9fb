"""Time candidate detection and multi-patch scoring on one 2084 x 2084 field.

The field is stitched from synthetic tiles. Weights are random: only the wall
time matters here, not the probabilities.

    python scripts/throughput.py --preset paper
"""

import argparse
import logging
import time

import numpy as np

from mitodml.backbone import WideResNet, preset
from mitodml.candidates import detect_candidates
from mitodml.evaluation import EvalImage, score_images
from mitodml.synth import SynthConfig, synth_image

SIDE = 2084


def stitched_field(seed: int, tile: int = 160) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cfg = SynthConfig(image_size=tile, seed=seed)
    n = -(-SIDE // tile)
    rows = [np.concatenate([synth_image(cfg, rng).rgb for _ in range(n)], axis=1) for _ in range(n)]
    return np.concatenate(rows, axis=0)[:SIDE, :SIDE]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-candidates", type=int, help="score only the first N candidates")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    log = logging.getLogger("throughput")

    rgb = stitched_field(args.seed)
    t0 = time.perf_counter()
    cands = detect_candidates(rgb)
    t_detect = time.perf_counter() - t0
    log.info("detected %d candidates in %.2fs", len(cands), t_detect)

    net = WideResNet(preset(args.preset))
    params = net.init_params(np.random.default_rng(args.seed))
    scored = cands[:args.max_candidates] if args.max_candidates else cands
    t0 = time.perf_counter()
    score_images(net, params, [EvalImage("field", rgb, scored, [])])
    t_score = time.perf_counter() - t0
    log.info("scored %d candidates (%s preset) in %.2fs", len(scored), args.preset, t_score)
    log.info("total %.2fs for a %dx%d field", t_detect + t_score, SIDE, SIDE)


if __name__ == "__main__":
    main()
