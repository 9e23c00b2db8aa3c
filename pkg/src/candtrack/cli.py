"""Command-line interface.

Subcommands: gen (simulate datasets), train, track, eval, gradcheck, bench.
Exit codes: 0 success, 2 invalid configuration or file format, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .diffmath import Tape, grad_check
from .matcher import SimilarityMatrix, sinkhorn
from .model import ModelParams
from .pipeline import (
    FormatError,
    TrackerConfig,
    evaluate,
    read_json,
    sequence_from_payload,
    sequence_to_payload,
    track_sequence,
    trackerconfig_from_dict,
    write_json,
)
from .simulator import (
    SimConfig,
    generate_sequence,
    make_crossing_config,
    simconfig_from_dict,
)
from .training import (
    NumericalError,
    TrainConfig,
    make_synthetic_pair,
    pair_loss_forward,
    train,
)
from .scoremap import Candidate

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_NUMERIC = 3


def _sequence_seed(base: int, index: int) -> int:
    return base * 100003 + index


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_cfg = None
    if args.config:
        base_cfg = simconfig_from_dict(read_json(args.config))
    for i in range(args.sequences):
        seed = _sequence_seed(args.seed, i)
        if args.preset == "crossing":
            cfg_rng = np.random.default_rng(seed ^ 0x5EED)
            cfg = make_crossing_config(cfg_rng, frames=args.frames)
        elif base_cfg is not None:
            cfg = base_cfg if base_cfg.frames == args.frames else SimConfig(
                **{**base_cfg.__dict__, "frames": args.frames}
            )
        else:
            cfg = SimConfig(frames=args.frames)
        seq = generate_sequence(cfg, seed)
        write_json(out / f"seq_{i:03d}.json", sequence_to_payload(seq))
    print(f"wrote {args.sequences} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    paths = sorted(data_dir.glob("seq_*.json"))
    if not paths:
        raise FormatError(f"no seq_*.json files under {data_dir}")
    sequences = [sequence_from_payload(read_json(p)) for p in paths]
    cfg = TrainConfig(
        epochs=args.epochs,
        pairs_per_epoch=args.pairs_per_epoch,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        d_model=args.dim,
        psi_hidden=tuple(args.psi_hidden),
    )
    model, curve = train(sequences, cfg)
    write_json(args.out, model.to_payload())
    curve_path = args.curve or str(Path(args.out).with_suffix(".loss.csv"))
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, value in enumerate(curve):
            fh.write(f"{epoch},{value!r}\n")
    print(f"trained {args.epochs} epochs; final mean loss {curve[-1]:.4f}")
    return EXIT_OK


def cmd_track(args) -> int:
    model = ModelParams.from_payload(read_json(args.model))
    seq = sequence_from_payload(read_json(args.data))
    cfg = (
        trackerconfig_from_dict(read_json(args.config))
        if args.config
        else TrackerConfig()
    )
    results = track_sequence(seq, model, cfg)
    write_json(args.out, results)
    n_sel = sum(1 for f in results["frames"] if f["selected"] is not None)
    print(f"tracked {len(results['frames'])} frames, target selected in {n_sel}")
    return EXIT_OK


def cmd_eval(args) -> int:
    results = read_json(args.results)
    seq = sequence_from_payload(read_json(args.gt))
    try:
        metrics = evaluate(results, seq)
    except (KeyError, TypeError) as err:
        raise FormatError(f"malformed results file: {err}") from err
    write_json(args.out, metrics)
    print(
        "accuracy {target_accuracy:.3f}  switches {id_switches}  "
        "precision {association_precision:.3f}  recall {association_recall:.3f}".format(
            **metrics
        )
    )
    return EXIT_OK


def _gradcheck_scenario(seed: int, n_candidates: int):
    rng = np.random.default_rng(seed)
    model = ModelParams.create(
        d_appearance=6, dim=16, psi_hidden=(8, 12), seed=seed
    )
    cands = [
        Candidate(
            score=float(rng.uniform(0.1, 0.9)),
            location=(int(rng.integers(0, 30)), int(rng.integers(0, 30))),
            appearance=rng.normal(size=6),
        )
        for _ in range(n_candidates)
    ]
    sample = make_synthetic_pair(
        cands, (30, 30), 6, rng, pad_to=n_candidates
    )
    return model, sample


def cmd_gradcheck(args) -> int:
    model, sample = _gradcheck_scenario(args.seed, args.candidates)
    leaves_map = model.named_parameters()
    names = sorted(leaves_map)
    picked = names if args.all else names[:: max(len(names) // 6, 1)][:6]
    leaves = [leaves_map[n] for n in picked]

    def f():
        return pair_loss_forward(sample, model, Tape(), mode="train")

    err = grad_check(f, leaves, step=1e-4)
    print(f"gradcheck seed={args.seed} tensors={len(leaves)} max rel err {err:.3e}")
    if err >= 1e-4:
        print("gradient check FAILED (>= 1e-4)", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(args) -> int:
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for _ in range(200):
        sim = SimilarityMatrix(values=rng.normal(size=(6, 6)), dustbin_score=1.0)
        sinkhorn(sim, 10)
    sink_ms = (time.perf_counter() - t0) / 200 * 1e3

    model, sample = _gradcheck_scenario(0, 5)
    t0 = time.perf_counter()
    for _ in range(50):
        pair_loss_forward(sample, model, None, mode="infer")
    fwd_ms = (time.perf_counter() - t0) / 50 * 1e3

    cfg = SimConfig(frames=20)
    t0 = time.perf_counter()
    seq = generate_sequence(cfg, 0)
    gen_ms = (time.perf_counter() - t0) * 1e3

    model_full = ModelParams.create(d_appearance=cfg.d_appearance, dim=16, psi_hidden=(8, 12))
    t0 = time.perf_counter()
    track_sequence(seq, model_full)
    track_ms = (time.perf_counter() - t0) / cfg.frames * 1e3

    print(f"sinkhorn 6x6 x10 iters   {sink_ms:8.3f} ms")
    print(f"pair forward (5 cands)   {fwd_ms:8.3f} ms")
    print(f"generate 20-frame seq    {gen_ms:8.3f} ms")
    print(f"track per frame          {track_ms:8.3f} ms")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="candtrack", description="candidate-association tracking toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic sequences")
    p.add_argument("--config", default=None, help="simulator config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--preset", choices=("random", "crossing"), default="random")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train the association network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None, help="loss curve CSV path")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--pairs-per-epoch", type=int, default=800)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--psi-hidden", type=int, nargs="+", default=[8, 12])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("track", help="run the tracker on a sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="tracker config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="score results against ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--candidates", type=int, default=4)
    p.add_argument("--all", action="store_true", help="check every tensor")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="timing report")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
