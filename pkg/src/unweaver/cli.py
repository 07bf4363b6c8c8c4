"""Command-line interface: gen, train, finetune, eval, baseline, gradcheck,
serve, and report subcommands.

Every command takes ``--profile``/``--config``/``--seed``; all randomness is
derived from the master seed, so outputs are reproducible from (config,
seed) alone. Bad configuration exits with status 2, runtime failures with 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, config_hash, load_config
from .core import Story
from .metrics import ri_by_length, summarize
from .persist import (
    load_checkpoint,
    read_csv,
    read_stories,
    save_checkpoint,
    write_csv,
    write_json,
    write_stories,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="run config JSON")
    parser.add_argument("--profile", choices=["desk", "paper-scale"], help="named profile")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out-dir", type=Path, help="output directory override")


def _load(args: argparse.Namespace) -> RunConfig:
    return load_config(
        path=args.config,
        profile=args.profile,
        seed=args.seed,
        out_dir=str(args.out_dir) if args.out_dir else None,
    )


def _story_rows(evals) -> list[list]:
    return [
        [e.story_id, e.length, e.truth_threads, e.pred_threads, f"{e.ri:.6f}", e.dn]
        for e in evals
    ]


STORY_HEADER = ["story_id", "length", "truth_threads", "pred_threads", "ri", "dn"]


def cmd_gen(args: argparse.Namespace) -> int:
    from .storygen import extract_natural_stories, generate_stream, sample_synthetic_story

    cfg = _load(args)
    rng = np.random.default_rng(cfg.component_seed("gen"))
    streams = [
        generate_stream(cfg.world_config("gen", index=i)) for i in range(args.streams)
    ]
    stories: list[Story] = []
    if args.kind == "synthetic":
        for i in range(args.count):
            stream = streams[int(rng.integers(len(streams)))]
            stories.append(
                sample_synthetic_story(stream, cfg.story, rng, story_id=f"gen-{i}")
            )
    else:
        per = max(1, args.count // len(streams))
        for stream in streams:
            stories.extend(
                extract_natural_stories(
                    stream,
                    cfg.eval.natural_window,
                    cfg.eval.natural_clip_len,
                    rng,
                    count=per,
                    prefix="gen",
                )
            )
        stories = stories[: args.count]
    write_stories(args.out, stories)
    buckets: dict[int, int] = {}
    for s in stories:
        n = s.ground_truth.thread_count
        buckets[n] = buckets.get(n, 0) + 1
    write_json(
        Path(str(args.out) + ".manifest.json"),
        {
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "kind": args.kind,
            "count": len(stories),
            "stories_by_thread_count": {str(k): v for k, v in sorted(buckets.items())},
        },
    )
    print(f"wrote {len(stories)} stories to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .experiments import build_data, pretrain_model
    from .train import TrainingDiverged, mean_online_ri

    cfg = _load(args)
    out = Path(cfg.out_dir)
    bundle = build_data(cfg)
    try:
        model = pretrain_model(
            cfg,
            bundle,
            log_path=out / "pretrain_log.csv",
            checkpoint_dir=out / "checkpoints",
        )
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    save_checkpoint(model, out / "model_ss.npz")
    ri = mean_online_ri(model, bundle.natural_val)
    print(f"pretrained model saved to {out / 'model_ss.npz'} (val RI {ri:.4f})")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    from .experiments import build_data, finetune_model, init_run_model
    from .train import mean_online_ri

    cfg = _load(args)
    out = Path(cfg.out_dir)
    bundle = build_data(cfg)
    if args.model is not None:
        model, _ = load_checkpoint(args.model)
    else:
        model = init_run_model(cfg)  # AS regime: finetune from random init
    tuned = finetune_model(cfg, model, bundle, log_path=out / "finetune_log.csv")
    save_checkpoint(tuned, out / "model_finetuned.npz")
    ri = mean_online_ri(tuned, bundle.natural_val)
    print(f"finetuned model saved to {out / 'model_finetuned.npz'} (val RI {ri:.4f})")
    return 0


def _write_method_eval(out: Path, method, cfg: RunConfig) -> None:
    write_csv(out / f"{method.name}_per_story.csv", STORY_HEADER, _story_rows(method.report.per_story))
    if method.tfa_prefix is not None:
        write_csv(
            out / f"{method.name}_tfa_curve.csv",
            ["method", "clips_observed", "accuracy"],
            [[method.name, t, f"{a:.6f}"] for t, a in method.tfa_prefix.by_step.items()],
        )
    summary = {
        "method": method.name,
        "ri_by_bucket": method.report.ri_by_bucket,
        "ri_overall": method.report.ri_overall,
        "ri_bucket_mean": method.report.ri_bucket_mean,
        "dn_by_bucket": method.report.dn_by_bucket,
        "dn_overall": method.report.dn_overall,
        "config_hash": config_hash(cfg),
    }
    if method.tfa_prefix is not None:
        summary["tfa_by_threads_prefix"] = method.tfa_prefix.by_threads
        summary["tfa_by_threads_story"] = method.tfa_story.by_threads
        summary["tfa_overall"] = method.tfa_prefix.overall
    write_json(out / f"{method.name}_summary.json", summary)
    print(method.report.format_table(method.name))


def cmd_eval(args: argparse.Namespace) -> int:
    from .experiments import evaluate_baselines, evaluate_model

    cfg = _load(args)
    out = Path(cfg.out_dir)
    stories = read_stories(args.stories)
    if args.model is not None:
        model, _ = load_checkpoint(args.model)
        method = evaluate_model(model, stories, name=args.name or "model")
        _write_method_eval(out, method, cfg)
    else:
        val = read_stories(args.val_stories) if args.val_stories else stories
        evals, cluster_cfg, predict_cfg = evaluate_baselines(stories, val)
        for method in evals:
            _write_method_eval(out, method, cfg)
        write_json(
            out / "baseline_fits.json",
            {
                "clustering_threshold": cluster_cfg.threshold,
                "predictability_threshold": predict_cfg.threshold,
            },
        )
    # EGO-TOPO-style location baseline is out of scope; report the slot as absent.
    write_json(out / "absent_methods.json", {"absent": ["location-graph"]})
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    from .baselines import (
        ClusteringConfig,
        PredictabilityConfig,
        fit_predictability,
        fit_threshold,
        online_cluster,
        predict_single_thread,
        predictability,
    )
    from .metrics import expected_ri_chance, expected_ri_single_thread, expected_thread_count_chance

    cfg = _load(args)
    out = Path(cfg.out_dir)
    stories = read_stories(args.stories)
    rows = []
    if args.name == "chance":
        for s in stories:
            if len(s) < 2:
                continue
            truth = s.ground_truth.labels
            rows.append(
                [
                    s.id,
                    f"{expected_ri_chance(truth):.6f}",
                    f"{expected_thread_count_chance(len(s)) - len(set(truth)):.4f}",
                ]
            )
        write_csv(out / "chance_expectations.csv", ["story_id", "expected_ri", "expected_dn"], rows)
        print(f"wrote analytic chance expectations for {len(rows)} stories")
        return 0
    if args.name == "single":
        predict = predict_single_thread
    elif args.name == "cluster":
        val = read_stories(args.val_stories) if args.val_stories else stories
        ccfg = ClusteringConfig(args.threshold) if args.threshold is not None else fit_threshold(val)
        predict = lambda s: online_cluster(s, ccfg)
    else:  # predictability
        val = read_stories(args.val_stories) if args.val_stories else stories
        pcfg = (
            PredictabilityConfig(threshold=args.threshold)
            if args.threshold is not None
            else fit_predictability(val)
        )
        predict = lambda s: predictability(s, pcfg)
    for s in stories:
        labels = predict(s).labels
        rows.append([s.id, json.dumps([y - 1 for y in labels])])
    write_csv(out / f"{args.name}_predictions.csv", ["story_id", "labels"], rows)
    print(f"wrote {args.name} predictions for {len(rows)} stories")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .controller import init_model
    from .core import canonicalize
    from .train import finite_diff_check

    cfg = _load(args)
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.model.dims(cfg.world.clip_dim)
    labels = canonicalize([1, 1, 2, 1, 3, 2, 1])  # continue, new, and resume steps
    story = Story(
        id="gradcheck",
        clips=rng.normal(size=(len(labels), dims.clip_dim)).astype(np.float64),
        ground_truth=labels,
    )
    worst = 0.0
    for selector in ("linear", "transformer"):
        for updater in ("gru", "last_clip"):
            model = init_model(selector, updater, dims, seed=cfg.seed, tau=cfg.model.tau)
            report = finite_diff_check(model, story, eps=args.eps, max_coords=args.coords)
            print(f"== {selector} selector, {updater} updater")
            print(report.format())
            worst = max(worst, report.overall)
    print(f"\nworst case overall: {worst:.3e} ({'PASS' if worst < 1e-4 else 'FAIL'})")
    return 0 if worst < 1e-4 else 1


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    cfg = _load(args)
    app = create_app(
        pool_path=args.stories,
        log_path=args.annotations,
        static_dir=args.static,
        seed=cfg.component_seed("service"),
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    results = Path(args.results)
    story_files = sorted(results.glob("*_per_story.csv"))
    if not story_files:
        print(f"error: no *_per_story.csv files in {results}", file=sys.stderr)
        return 1
    curves: list[list] = []
    for curve_file in sorted(results.glob("*_tfa_curve.csv")):
        _, rows = read_csv(curve_file)
        curves.extend(rows)
    if curves:
        write_csv(results / "tfa_by_clips_observed.csv", ["method", "clips_observed", "accuracy"], curves)
    length_rows = []
    for story_file in story_files:
        method = story_file.name[: -len("_per_story.csv")]
        _, rows = read_csv(story_file)
        from .metrics import StoryEval

        evals = [
            StoryEval(r[0], int(r[1]), int(r[2]), int(r[3]), float(r[4]), int(r[5]))
            for r in rows
        ]
        print(summarize(evals).format_table(method))
        for bin_name, ri in ri_by_length(evals).items():
            length_rows.append([method, bin_name, f"{ri:.6f}"])
    write_csv(results / "ri_by_story_length.csv", ["method", "length_bin", "ri"], length_rows)
    print(f"wrote {results / 'tfa_by_clips_observed.csv'} and {results / 'ri_by_story_length.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unweaver",
        description="Online unweaving of activity streams into threads",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a stories JSONL file plus manifest")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--kind", choices=["synthetic", "natural"], default="synthetic")
    p.add_argument("--streams", type=int, default=4)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="pretrain on freshly woven synthetic stories")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="finetune a checkpoint on natural stories")
    _add_common(p)
    p.add_argument("--model", type=Path, help="checkpoint to start from (default: random init)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the baselines on stories")
    _add_common(p)
    p.add_argument("--stories", type=Path, required=True)
    p.add_argument("--val-stories", type=Path, help="validation stories for threshold fits")
    p.add_argument("--model", type=Path, help="model checkpoint (omit to run baselines)")
    p.add_argument("--name", help="method name used in report files")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("baseline", help="run one baseline over a stories file")
    _add_common(p)
    p.add_argument("--name", choices=["single", "chance", "cluster", "predictability"], required=True)
    p.add_argument("--stories", type=Path, required=True)
    p.add_argument("--val-stories", type=Path)
    p.add_argument("--threshold", type=float)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=200)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    _add_common(p)
    p.add_argument("--stories", type=Path, required=True, help="story pool JSONL")
    p.add_argument("--annotations", type=Path, required=True, help="append-only log path")
    p.add_argument("--static", type=Path, help="annotator UI bundle directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("report", help="merge eval artifacts into tables and curves")
    p.add_argument("--results", type=Path, required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
