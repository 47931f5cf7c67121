"""Command line entry point: ``sctseg {train,evaluate,predict,gradcheck,synth}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or failed gradient check).
"""

import argparse
import logging
import sys
from pathlib import Path

from . import metrics
from .config import ConfigError, describe, load_config, model_config, run_config, synth_config
from .data import CorpusFormatError, gen_synthetic, load_corpus, read_features, save_corpus
from .network import CheckpointError, ParameterStore, load_checkpoint
from .training import (
    CompatibilityError,
    NumericError,
    evaluate,
    gradcheck,
    predict,
    tiny_instance,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("sctseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _num_classes(corpus, requested):
    ids = [max(r.action_set) for r in corpus.videos.values() if r.action_set]
    ids += [int(r.labels.max()) for r in corpus.videos.values() if r.labels is not None]
    needed = max(ids) + 1
    if requested and requested < needed:
        raise CompatibilityError(f"corpus uses class id {needed - 1} but classes={requested}")
    return max(requested or needed, 2)


def cmd_train(args):
    values = load_config(args.config)
    if not values["corpus"]:
        raise ConfigError("train needs a corpus key")
    corpus = load_corpus(values["corpus"])
    videos = corpus.split("train")
    if not videos:
        raise CompatibilityError(f"corpus {values['corpus']} has no training videos")
    config = run_config(values, corpus.dims, _num_classes(corpus, values["classes"]))
    out = Path(args.out or values["out"] or "run")
    params, log = train(config, videos, out_dir=out)
    last = log[-1] if log else None
    if last:
        print(f"epoch {last['epoch']}: total loss {last['total']:.4f}, train MoF {100 * last['train_mof']:.2f}%")
    print(f"checkpoint written to {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_evaluate(args):
    params, extra = load_checkpoint(args.ckpt)
    root = args.corpus or extra.get("run", {}).get("corpus")
    if not root:
        raise UsageError("checkpoint does not record a corpus; pass --corpus")
    corpus = load_corpus(root)
    videos = corpus.split(args.split)
    if not videos:
        raise CompatibilityError(f"split {args.split!r} of {root} is empty")
    report, rows, _ = evaluate(params, videos, background=args.background)
    sys.stdout.write(metrics.report_text(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.csv").write_text(metrics.report_csv(report, rows))
    return EXIT_OK


def cmd_predict(args):
    params, _ = load_checkpoint(args.ckpt)
    X = read_features(args.features)
    labels, regions, _ = predict(params, X, out_dir=args.out)
    segs = metrics.frames_to_segments(labels)
    print(f"{len(labels)} frames, {len(regions)} regions, {len(segs)} segments; written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    values = load_config(args.config)
    rec = tiny_instance(T=values["gradcheck.T"], D=values["gradcheck.D"], C=values["gradcheck.C"],
                        M=values["gradcheck.M"], seed=values["seed"])
    cfg = model_config({**values, "dtype": "float64"}, values["gradcheck.D"], values["gradcheck.C"],
                       hidden=values["gradcheck.hidden"])
    params = ParameterStore.init(cfg, seed=values["seed"])
    weights = run_config(values, cfg.D, cfg.C).weights
    result = gradcheck(params, rec, weights, h=values["gradcheck.h"], threshold=values["gradcheck.threshold"],
                       max_entries=values["gradcheck.entries"], seed=values["seed"])
    print(result.report())
    return EXIT_OK if result.passed else EXIT_NUMERIC


def cmd_synth(args):
    values = load_config(args.config)
    cfg = synth_config(values)
    corpus = gen_synthetic(cfg, values["synth.train"], values["synth.test"])
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.train)} train and {len(corpus.test)} test videos to {args.out}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="sctseg", description="Action segmentation from action-set supervision.",
                epilog="config keys:\n" + describe(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train on the corpus named in the config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override the config's out directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="MoF, Jaccard and midpoint hit of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test", choices=["train", "test"])
    s.add_argument("--corpus", help="corpus root (default: the one recorded in the checkpoint)")
    s.add_argument("--background", type=int, default=0, help="class id ignored by midpoint hit")
    s.add_argument("--out", help="directory for a per-video CSV report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="segment one feature file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference check of all gradients on a tiny model")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusFormatError, CheckpointError, CompatibilityError, FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # shape and range problems in the inputs
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
