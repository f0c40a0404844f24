"""Command-line surface: explain, bound, bound-verify, evaluate, corpus, render.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every command is
deterministic given its flags and seeds; report-producing commands write
figures next to their delimited tables so the output directory stands alone.

Flags may also come from a UTF-8 config file of ``key = value`` lines via
``--config``; explicitly passed flags win over config values.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import shlex
import sys

import numpy as np

from relax.core import (
    STREAM_MASKS,
    STREAM_SCENES,
    Image,
    RngSpec,
)
from relax.baselines import SaliencySpec, SmoothgradParams
from relax.engine import (
    UNCERTAINTY_NORMS,
    UrelaxPolicy,
    bound_verification_run,
    mask_count_bound,
    relax_one_pass,
    relax_two_pass,
    urelax_filter,
)
from relax.evalmetrics import (
    METHODS,
    METRICS,
    EvalSettings,
    evaluate_corpus,
    format_score_table,
)
from relax.extractors import (
    DownsampleFlattenExtractor,
    Extractor,
    ExternalExtractor,
    HogExtractor,
    HogParams,
    LinearProjectionExtractor,
)
from relax.formats import (
    atomic_write_bytes,
    load_image,
    read_tensor,
    render_heatmap,
    write_tensor,
)
from relax.maskgen import (
    BLOCK_DROPOUT,
    PER_PIXEL_BERNOULLI,
    RISE_BILINEAR,
    RISE_NOISE_FILL,
    MaskBatchSpec,
    MaskStrategy,
)
from relax.synthdata import MANIFEST_NAME, Corpus, SceneSpec, generate_corpus

_STRATEGY_NAMES = {
    "rise": RISE_BILINEAR,
    "pixel": PER_PIXEL_BERNOULLI,
    "block": BLOCK_DROPOUT,
    "noisefill": RISE_NOISE_FILL,
}

# CLI method spellings -> canonical method names.
_METHOD_NAMES = {name.lower().replace("-", ""): name for name in METHODS}

# Boolean flags per subcommand, for config-file expansion.
_BOOL_FLAGS = {
    "explain": {"urelax", "render", "overlay", "noise-additive"},
    "evaluate": {"noise-additive"},
    "bound-verify": {"noise-additive"},
}


class UsageError(ValueError):
    """Bad flag values; exits with code 1 rather than 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 on usage problems
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Flag-value parsing helpers.


def _parse_kv(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    if not text:
        return values
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"expected comma-separated key=value pairs, got {part!r}")
        key, _, value = part.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise UsageError(f"empty key or value in {part!r}")
        values[key] = value
    return values


def _as_bool(value: str, name: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"{name} must be a boolean, got {value!r}")


def _reject_extra(values: dict[str, str], context: str) -> None:
    if values:
        raise UsageError(f"unknown {context} keys: {', '.join(sorted(values))}")


def _corpus_root(path: str) -> str:
    if os.path.basename(path) == MANIFEST_NAME:
        return os.path.dirname(path) or "."
    return path


def _read_config(path: str) -> list[tuple[str, str]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise UsageError(f"{path}:{lineno}: empty key")
            pairs.append((key, value))
    return pairs


def _expand_config(argv: list[str]) -> list[str]:
    """Splice config-file values in as flags ahead of the explicit ones."""
    if "--config" not in argv:
        return argv
    position = argv.index("--config")
    if position == 0:
        raise UsageError("--config must follow a subcommand")
    if position + 1 >= len(argv):
        raise UsageError("--config requires a file path")
    subcommand = argv[0]
    booleans = _BOOL_FLAGS.get(subcommand, set())
    flags: list[str] = []
    for key, value in _read_config(argv[position + 1]):
        name = key.replace("_", "-")
        if name in booleans:
            if _as_bool(value, key):
                flags.append(f"--{name}")
        else:
            flags.extend((f"--{name}", value))
    rest = argv[1:position] + argv[position + 2 :]
    return [subcommand] + flags + rest


# ---------------------------------------------------------------------------
# Object construction from flags.


def _build_extractor(args: argparse.Namespace) -> Extractor:
    opts = _parse_kv(getattr(args, "extractor_opts", "") or "")
    kind = args.extractor
    if kind == "hog":
        params = HogParams(
            cell=int(opts.pop("cell", 8)),
            block=int(opts.pop("block", 2)),
            bins=int(opts.pop("bins", 9)),
            signed=_as_bool(opts.pop("signed", "false"), "signed"),
            norm_eps=float(opts.pop("eps", 1e-6)),
        )
        _reject_extra(opts, "hog extractor")
        return HogExtractor(params)
    if kind == "downsample":
        pool = int(opts.pop("pool", 8))
        pool_h = int(opts.pop("pool_h", pool))
        pool_w = int(opts.pop("pool_w", pool))
        _reject_extra(opts, "downsample extractor")
        return DownsampleFlattenExtractor(pool_h, pool_w)
    if kind == "linear":
        dim = int(opts.pop("dim", 64))
        seed = int(opts.pop("seed", 0))
        _reject_extra(opts, "linear extractor")
        return LinearProjectionExtractor(dim, seed)
    if kind == "external":
        command = getattr(args, "extractor_cmd", None)
        if not command:
            raise UsageError("--extractor external requires --extractor-cmd")
        batch = int(opts.pop("batch", 32))
        timeout = float(opts.pop("timeout", 60.0))
        _reject_extra(opts, "external extractor")
        return ExternalExtractor(shlex.split(command), batch_size=batch, timeout=timeout)
    raise UsageError(f"unknown extractor {kind!r}")


def _fill_grids(stats_path: str) -> tuple[np.ndarray, np.ndarray]:
    corpus = Corpus(_corpus_root(stats_path))
    mean, std = corpus.load_stats()
    # Noise statistics are per pixel; multi-channel grids reduce over channels.
    return mean.mean(axis=2), std.mean(axis=2)


def _build_masks(args: argparse.Namespace, default_stats: str | None = None) -> tuple[int, MaskStrategy]:
    opts = _parse_kv(args.masks)
    n_masks = int(opts.pop("n", 3000))
    variant = _STRATEGY_NAMES[args.strategy]
    kwargs: dict = {
        "variant": variant,
        "h": int(opts.pop("h", 7)),
        "w": int(opts.pop("w", 7)),
        "p": float(opts.pop("p", 0.5)),
        "block": int(opts.pop("block", 8)),
    }
    _reject_extra(opts, "mask")
    if variant == RISE_NOISE_FILL:
        stats = getattr(args, "stats", None) or default_stats
        if not stats:
            raise UsageError("--strategy noisefill requires --stats (corpus manifest)")
        fill_mean, fill_std = _fill_grids(stats)
        kwargs.update(
            fill_mean=fill_mean,
            fill_std=fill_std,
            noise_additive=bool(getattr(args, "noise_additive", False)),
        )
    return n_masks, MaskStrategy(**kwargs)


def _parse_methods(text: str) -> list[str]:
    methods = []
    for part in text.split(","):
        key = part.strip().lower().replace("-", "")
        if key not in _METHOD_NAMES:
            raise UsageError(
                f"unknown method {part.strip()!r}; valid: "
                + ", ".join(sorted(_METHOD_NAMES))
            )
        methods.append(_METHOD_NAMES[key])
    if not methods:
        raise UsageError("--methods must name at least one method")
    return methods


def _parse_metrics(text: str) -> list[str]:
    metrics = []
    for part in text.split(","):
        key = part.strip().lower()
        if key not in METRICS:
            raise UsageError(f"unknown metric {part.strip()!r}; valid: {', '.join(METRICS)}")
        metrics.append(key)
    if not metrics:
        raise UsageError("--metrics must name at least one metric")
    return metrics


def _overlay_bytes(image: Image) -> np.ndarray:
    base = np.rint(image.data.astype(np.float64) * 255.0).astype(np.uint8)
    if base.shape[2] == 1:
        return base[:, :, 0]
    return base


# ---------------------------------------------------------------------------
# Subcommands.


def _cmd_explain(args: argparse.Namespace) -> int:
    image = load_image(args.image)
    extractor = _build_extractor(args)
    n_masks, strategy = _build_masks(args)
    spec = MaskBatchSpec(n_masks, strategy, RngSpec(args.seed, STREAM_MASKS))
    estimator = relax_one_pass if args.estimator == "one-pass" else relax_two_pass

    with contextlib.ExitStack() as stack:
        if isinstance(extractor, ExternalExtractor):
            stack.enter_context(extractor)
        explanation = estimator(
            image,
            extractor,
            spec,
            uncertainty_norm=args.uncertainty_norm,
            batch_size=args.batch_size,
        )

    os.makedirs(args.out, exist_ok=True)
    write_tensor(os.path.join(args.out, "importance.rlxt"), explanation.importance)
    write_tensor(os.path.join(args.out, "uncertainty.rlxt"), explanation.uncertainty)
    write_tensor(os.path.join(args.out, "mask_weight.rlxt"), explanation.mask_weight)

    filtered = None
    if args.urelax:
        policy = UrelaxPolicy(aggregation=args.aggregation, gamma=args.gamma)
        filtered = urelax_filter(explanation, policy)
        write_tensor(os.path.join(args.out, "urelax.rlxt"), filtered)

    meta_lines = [
        f"image = {os.path.basename(args.image)}",
        f"extractor = {extractor.descriptor()}",
        f"masks = {strategy.descriptor()}",
        f"n_masks = {explanation.n_masks}",
        f"seed = {explanation.seed}",
        f"estimator = {args.estimator}",
        f"uncertainty_norm = {args.uncertainty_norm}",
        f"config_digest = {explanation.config_digest}",
        f"n_zero_similarity = {explanation.n_zero_similarity}",
    ]
    atomic_write_bytes(
        os.path.join(args.out, "meta.txt"), ("\n".join(meta_lines) + "\n").encode("utf-8")
    )

    if args.render:
        overlay = _overlay_bytes(image) if args.overlay else None
        render_heatmap(
            os.path.join(args.out, "importance.ppm"), explanation.importance, overlay
        )
        render_heatmap(
            os.path.join(args.out, "uncertainty.ppm"), explanation.uncertainty, overlay
        )
        if filtered is not None:
            render_heatmap(os.path.join(args.out, "urelax.ppm"), filtered, overlay)

    print(f"wrote explanation for {args.image} to {args.out}")
    return 0


def _cmd_bound(args: argparse.Namespace) -> int:
    print(mask_count_bound(args.delta, args.t))
    return 0


def _cmd_bound_verify(args: argparse.Namespace) -> int:
    from relax.report import bound_figure
    from relax.synthdata import generate_scene

    if args.image:
        image = load_image(args.image)
    else:
        scene_spec = SceneSpec(rng=RngSpec(args.seed, STREAM_SCENES))
        image, _, _ = generate_scene(scene_spec)
    extractor = _build_extractor(args)
    _, strategy = _build_masks(args)
    n_grid = [int(part) for part in args.n_grid.split(",") if part.strip()]
    if not n_grid:
        raise UsageError("--n-grid must list at least one mask count")

    with contextlib.ExitStack() as stack:
        if isinstance(extractor, ExternalExtractor):
            stack.enter_context(extractor)
        rows = bound_verification_run(
            image,
            extractor,
            n_grid,
            args.repeats,
            args.reference_n,
            strategy,
            args.seed,
            delta=args.delta,
            batch_size=args.batch_size,
        )

    os.makedirs(args.out, exist_ok=True)
    lines = ["n_masks,mean_error,max_error,bound"]
    for row in rows:
        lines.append(
            f"{row.n_masks},{row.mean_error:.9g},{max(row.errors):.9g},{row.bound:.9g}"
        )
    table_path = os.path.join(args.out, "bound.csv")
    atomic_write_bytes(table_path, ("\n".join(lines) + "\n").encode("utf-8"))
    figure_path = os.path.join(args.out, "bound.png")
    bound_figure(rows, args.delta, figure_path)
    for line in lines:
        print(line)
    print(f"wrote {table_path} and {figure_path}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    from relax.report import score_figure

    methods = _parse_methods(args.methods)
    metrics = _parse_metrics(args.metrics)
    corpus = Corpus(_corpus_root(args.corpus))
    extractor = _build_extractor(args)
    n_masks, strategy = _build_masks(args, default_stats=_corpus_root(args.corpus))
    smoothgrad_params = SmoothgradParams(
        n_samples=args.smoothgrad_samples, sigma=args.smoothgrad_sigma, seed=args.seed
    )
    settings = EvalSettings(
        n_masks=n_masks,
        strategy=strategy,
        seed=args.seed,
        n_repeats=args.repeats,
        urelax_policy=UrelaxPolicy(aggregation=args.aggregation, gamma=args.gamma),
        saliency_spec=SaliencySpec(fd_step=args.fd_step, smoothgrad=smoothgrad_params),
        topk=args.topk,
        bins=args.bins,
        batch_size=args.batch_size,
        limit=args.limit,
    )

    with contextlib.ExitStack() as stack:
        if isinstance(extractor, ExternalExtractor):
            stack.enter_context(extractor)
        rows = evaluate_corpus(corpus, methods, metrics, extractor, settings)

    delimiter = "\t" if args.delimiter == "tab" else ","
    table = format_score_table(rows, delimiter)
    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "scores.csv" if delimiter == "," else "scores.tsv")
    atomic_write_bytes(table_path, table.encode("utf-8"))
    figure_path = os.path.join(args.out, "scores.png")
    score_figure(rows, figure_path)
    sys.stdout.write(table)
    print(f"wrote {table_path} and {figure_path}")
    return 0


def _cmd_corpus(args: argparse.Namespace) -> int:
    shapes = tuple(part.strip() for part in args.shapes.split(",") if part.strip())
    textures = tuple(part.strip() for part in args.textures.split(",") if part.strip())
    template = SceneSpec(
        height=args.height,
        width=args.width,
        channels=args.channels,
        n_objects=args.objects,
        shapes=shapes,
        textures=textures,
        contrast=args.contrast,
        rng=RngSpec(args.seed, STREAM_SCENES),
    )
    corpus = generate_corpus(template, args.n, args.out)
    print(f"wrote {len(corpus)} scenes to {args.out}")
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    grid = read_tensor(args.tensor)
    if grid.ndim != 2:
        raise ValueError(f"heatmap tensor must be rank 2, got rank {grid.ndim}")
    overlay = None
    if args.overlay:
        overlay = _overlay_bytes(load_image(args.overlay))
    render_heatmap(args.out, grid, overlay)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly.


def build_parser() -> _Parser:
    parser = _Parser(prog="relax", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--batch-size", type=int, default=64, help="extractor batch size")
    common.add_argument("--config", help="key = value file; explicit flags win")

    extractor_flags = _Parser(add_help=False)
    extractor_flags.add_argument(
        "--extractor",
        choices=("hog", "downsample", "linear", "external"),
        default="hog",
        help="feature extractor",
    )
    extractor_flags.add_argument(
        "--extractor-opts", default="", help="extractor options as key=value pairs"
    )
    extractor_flags.add_argument(
        "--extractor-cmd", help="child process command line (external extractor)"
    )

    mask_flags = _Parser(add_help=False)
    mask_flags.add_argument(
        "--masks", default="n=3000,h=7,w=7,p=0.5", help="mask options as key=value pairs"
    )
    mask_flags.add_argument(
        "--strategy",
        choices=tuple(_STRATEGY_NAMES),
        default="rise",
        help="masking distribution",
    )
    mask_flags.add_argument("--stats", help="corpus manifest supplying noise-fill statistics")
    mask_flags.add_argument(
        "--noise-additive",
        action="store_true",
        help="add (rather than subtract) fill noise outside the mask",
    )

    explain = sub.add_parser(
        "explain",
        parents=(common, extractor_flags, mask_flags),
        help="importance and uncertainty heatmaps for one image",
    )
    explain.add_argument("--image", required=True, help="input image (PGM/PPM)")
    explain.add_argument("--out", required=True, help="output directory")
    explain.add_argument(
        "--estimator",
        choices=("one-pass", "two-pass"),
        default="one-pass",
        help="accumulation scheme (identical results within tolerance)",
    )
    explain.add_argument(
        "--uncertainty-norm",
        choices=UNCERTAINTY_NORMS,
        default="w-1",
        help="uncertainty denominator: effective weight minus one, or mask count",
    )
    explain.add_argument("--urelax", action="store_true", help="also write the filtered map")
    explain.add_argument("--gamma", type=float, default=1.0, help="filter threshold scale")
    explain.add_argument(
        "--aggregation",
        choices=("median", "mean"),
        default="median",
        help="uncertainty aggregate defining the filter threshold",
    )
    explain.add_argument("--render", action="store_true", help="also write PPM heatmaps")
    explain.add_argument(
        "--overlay", action="store_true", help="blend heatmaps over the input image"
    )
    explain.set_defaults(func=_cmd_explain)

    bound = sub.add_parser("bound", help="masks needed for a target error at confidence")
    bound.add_argument("--delta", type=float, required=True, help="failure probability")
    bound.add_argument("--t", type=float, required=True, help="max pixel error")
    bound.set_defaults(func=_cmd_bound)

    bound_verify = sub.add_parser(
        "bound-verify",
        parents=(common, extractor_flags, mask_flags),
        help="empirical estimation error vs the theoretical bound",
    )
    bound_verify.add_argument("--out", required=True, help="output directory")
    bound_verify.add_argument("--image", help="input image (default: synthetic scene)")
    bound_verify.add_argument(
        "--n-grid", default="250,500,1000,3000", help="comma-separated mask counts"
    )
    bound_verify.add_argument("--repeats", type=int, default=5, help="runs per grid point")
    bound_verify.add_argument(
        "--reference-n", type=int, default=25000, help="masks for the reference estimate"
    )
    bound_verify.add_argument("--delta", type=float, default=0.01, help="bound confidence")
    bound_verify.set_defaults(func=_cmd_bound_verify)

    evaluate = sub.add_parser(
        "evaluate",
        parents=(common, extractor_flags, mask_flags),
        help="score methods against a corpus",
    )
    evaluate.add_argument("--corpus", required=True, help="corpus directory or manifest")
    evaluate.add_argument("--out", required=True, help="output directory")
    evaluate.add_argument(
        "--methods", default="relax,urelax,random", help="comma-separated method names"
    )
    evaluate.add_argument(
        "--metrics", default="pointing,topk,rank", help="comma-separated metric names"
    )
    evaluate.add_argument("--repeats", type=int, default=3, help="evaluation repeats")
    evaluate.add_argument("--gamma", type=float, default=1.0, help="filter threshold scale")
    evaluate.add_argument(
        "--aggregation", choices=("median", "mean"), default="median",
        help="uncertainty aggregate defining the filter threshold",
    )
    evaluate.add_argument("--topk", type=int, help="k for top-k intersection (default |GT|)")
    evaluate.add_argument("--bins", type=int, default=10, help="monotonicity bins")
    evaluate.add_argument("--limit", type=int, help="evaluate only the first N images")
    evaluate.add_argument("--fd-step", type=float, default=1e-3, help="saliency probe step")
    evaluate.add_argument(
        "--smoothgrad-samples", type=int, default=25, help="noisy copies per image"
    )
    evaluate.add_argument(
        "--smoothgrad-sigma", type=float, default=0.1, help="noise standard deviation"
    )
    evaluate.add_argument(
        "--delimiter", choices=("comma", "tab"), default="comma", help="table delimiter"
    )
    evaluate.set_defaults(func=_cmd_evaluate)

    corpus = sub.add_parser(
        "corpus", parents=(common,), help="generate a synthetic corpus"
    )
    corpus.add_argument("--out", required=True, help="corpus directory")
    corpus.add_argument("--n", type=int, required=True, help="number of scenes")
    corpus.add_argument("--height", type=int, default=64)
    corpus.add_argument("--width", type=int, default=64)
    corpus.add_argument("--channels", type=int, default=1, choices=(1, 3))
    corpus.add_argument("--objects", type=int, default=1, help="objects per scene")
    corpus.add_argument("--shapes", default="rectangle,ellipse")
    corpus.add_argument("--textures", default="checker,stripes,noise-patch")
    corpus.add_argument("--contrast", type=float, default=0.5)
    corpus.set_defaults(func=_cmd_corpus)

    render = sub.add_parser("render", help="render a tensor-file grid as a PPM heatmap")
    render.add_argument("--tensor", required=True, help="rank-2 tensor file")
    render.add_argument("--out", required=True, help="output PPM path")
    render.add_argument("--overlay", help="blend over this image (PGM/PPM)")
    render.set_defaults(func=_cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _expand_config(argv)
    except UsageError as exc:
        print(f"relax: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"relax: error: cannot read config: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"relax: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures exit 2, with a message
        print(f"relax: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
