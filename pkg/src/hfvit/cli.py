"""``hfvit`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import contextlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import data as dio
from .autodiff import Tensor
from .errors import ContractError, DataError, HfvitError, NumericError
from .evaluation import bench_csv, paired_bench
from .fusion import fuse_model
from .losses import level_accuracy
from .model import HfvitConfig, HfvitModel, count_flops, count_params, param_ledger
from .partition import (LEVEL_SLICES, NUM_BITS, decode_prediction, encode_tree, format_line,
                        rasterize, read_partition_file, tree_from_bits)
from .train import TrainConfig, predict_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _echo_config(command: str, **params) -> None:
    """Resolved settings go to stderr so runs can be reproduced."""
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()}
    click.echo(f"[hfvit {command}] " + json.dumps(resolved, sort_keys=True), err=True)


def _threads() -> int | None:
    value = os.environ.get("HFVIT_THREADS")
    if value is None:
        return None
    try:
        return max(1, int(value))
    except ValueError:
        raise click.UsageError(f"HFVIT_THREADS must be an integer, got {value!r}")


@click.group()
def cli():
    """HFViT CTU partition prediction."""


# ----------------------------------------------------------------------------


@cli.command("gen-data")
@click.option("--n", "count", type=click.IntRange(min=1), default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--qps", default="22,27,32,37", show_default=True, help="Comma-separated QP set.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def gen_data(count, seed, qps, out):
    """Write a synthetic oracle-labelled dataset."""
    try:
        qp_set = tuple(int(q) for q in qps.split(","))
    except ValueError:
        raise click.BadParameter(f"bad QP list {qps!r}", param_hint="--qps")
    if any(not 0 <= q <= 51 for q in qp_set):
        raise click.BadParameter("QPs must lie in 0..51", param_hint="--qps")
    _echo_config("gen-data", n=count, seed=seed, qps=list(qp_set), out=out)
    ds = dio.generate_synthetic_dataset(count, seed, qp_set)
    dio.save_dataset(ds, out)
    click.echo(f"wrote {len(ds)} CTUs to {out}", err=True)


@cli.command("train-toy")
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--epochs", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0), default=1e-4, show_default=True)
@click.option("--weight-decay", type=click.FloatRange(min=0), default=0.01, show_default=True)
@click.option("--optimizer", type=click.Choice(["adamw", "sgd"]), default="adamw", show_default=True)
@click.option("--schedule", type=click.Choice(["cosine", "constant"]), default="cosine", show_default=True)
@click.option("--d1", type=click.IntRange(min=1), default=1024, show_default=True)
@click.option("--d2", type=click.IntRange(min=1), default=1536, show_default=True)
@click.option("--p1", type=click.FloatRange(0, 1, max_open=True), default=0.3, show_default=True)
@click.option("--p2", type=click.FloatRange(0, 1, max_open=True), default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--checkpoint-dir", type=click.Path(file_okay=False, path_type=Path))
def train_toy(dataset, out, epochs, batch_size, lr, weight_decay, optimizer, schedule, d1, d2, p1, p2,
              seed, checkpoint_dir):
    """Train a model on a dataset file."""
    try:
        config = HfvitConfig(d1=d1, d2=d2, p1=p1, p2=p2, seed=seed)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, learning_rate=lr, weight_decay=weight_decay,
                       seed=seed, optimizer=optimizer, schedule=schedule)
    _echo_config("train-toy", dataset=dataset, out=out, model=config.to_dict(), train=vars(tcfg),
                 checkpoint_dir=checkpoint_dir)
    ds = dio.load_dataset(dataset)
    model, history = train(HfvitModel(config), ds, tcfg, checkpoint_dir=checkpoint_dir)
    for e in history:
        acc = " ".join("n/a" if a is None else f"{a:.2f}" for a in e.accuracy)
        click.echo(f"epoch {e.epoch} loss {e.loss:.6f} acc(L1 L2 L3 all) {acc}", err=True)
    dio.save_weights(model, out)


def _predict_frames(model, frames, qp, batch):
    samples = [s for i, f in enumerate(frames) for s in dio.tile_ctus(f, qp, i)]
    probs = []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        x = Tensor(np.stack([s.pixels for s in chunk]), dtype=model.pos_embed.dtype)
        probs.append(model(x, [s.qp for s in chunk]).data)
    probs = np.concatenate(probs)
    for s, p in zip(samples, probs):
        if not np.all(np.isfinite(p)):
            frame, x, y = s.origin
            raise NumericError(f"non-finite prediction for CTU at frame {frame}, x={x}, y={y}")
    return samples, probs


@cli.command()
@click.option("--weights", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--yuv", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--width", type=click.IntRange(min=2), required=True)
@click.option("--height", type=click.IntRange(min=2), required=True)
@click.option("--qp", type=click.IntRange(0, 51), required=True)
@click.option("--frames", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--threshold", type=click.FloatRange(0, 1), default=0.5, show_default=True)
@click.option("--batch", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path))
def predict(weights, yuv, width, height, qp, frames, threshold, batch, out):
    """Predict CTU partitions for a raw I420 sequence."""
    _echo_config("predict", weights=weights, yuv=yuv, width=width, height=height, qp=qp, frames=frames,
                 threshold=threshold, batch=batch, out=out)
    model = dio.load_weights(weights).eval()
    planes = dio.read_yuv_frames(yuv, width, height, frames)
    samples, probs = _predict_frames(model, planes, qp, batch)
    lines, bits = [], []
    for s, p in zip(samples, probs):
        label = encode_tree(decode_prediction(p, threshold))
        bits.append(label.array())
        lines.append(format_line(s.origin[1], s.origin[2], label.bits))
    text = "\n".join(lines) + "\n"
    if out is None:
        click.echo(text, nl=False)
    else:
        dio.atomic_write(out, text)
    bits = np.array(bits)
    rates = " ".join(f"L{i + 1}={bits[:, sl].mean():.3f}" for i, sl in enumerate(LEVEL_SLICES))
    click.echo(f"{len(samples)} CTUs; mean split rate {rates}", err=True)


@cli.command()
@click.option("--weights", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--probes", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def fuse(weights, out, probes, seed):
    """Fold batch norm into the preceding layers."""
    _echo_config("fuse", weights=weights, out=out, probes=probes, seed=seed)
    model = dio.load_weights(weights, expect_fused=False)
    fused, report = fuse_model(model, n_probes=probes, seed=seed)
    dio.save_weights(fused, out)
    click.echo(f"layers_fused={report.layers_fused} max_abs_output_delta={report.max_abs_output_delta:.3e} "
               f"ops {report.op_count_before} -> {report.op_count_after}")


@cli.command()
@click.option("--weights", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--fused", is_flag=True, help="Fuse BN before timing (if the weights are unfused).")
@click.option("--compare", is_flag=True, help="Time unfused and fused variants, interleaved.")
@click.option("--batch", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--reps", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--warmup", type=click.IntRange(min=0), default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False, path_type=Path))
def bench(weights, fused, compare, batch, reps, warmup, seed, csv_path):
    """Per-CTU inference latency."""
    threads = _threads() or 1
    _echo_config("bench", weights=weights, fused=fused, compare=compare, batch=batch, reps=reps,
                 warmup=warmup, seed=seed, threads=threads)
    model = dio.load_weights(weights)
    models = [model]
    if compare or fused:
        if model.config.fused:
            raise click.UsageError("--fused/--compare need unfused weights")
        fused_model, _ = fuse_model(model, n_probes=1, seed=seed)
        models = [model, fused_model] if compare else [fused_model]
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(batch, 64, 64), dtype=np.uint8)
    samples = [dio.CtuSample(dio.normalize(p), int(q)) for p, q in zip(pixels, rng.integers(0, 52, size=batch))]
    results = paired_bench(models, samples, reps=reps, warmup=warmup, threads=threads)
    text = bench_csv(results, [count_params(m.config) for m in models], [count_flops(m.config) for m in models],
                     threads)
    if csv_path is None:
        click.echo(text, nl=False)
    else:
        dio.atomic_write(csv_path, text)
        for r in results:
            click.echo(f"{r.variant}: median {r.median_ms:.4f} ms/CTU (batch {r.batch}, {r.reps} reps)", err=True)


@cli.command("eval")
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--weights", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--pred", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Prediction lines in dataset order instead of running a model.")
@click.option("--threshold", type=click.FloatRange(0, 1), default=0.5, show_default=True)
def evaluate(dataset, weights, pred, threshold):
    """Per-level partition accuracy against dataset labels."""
    if (weights is None) == (pred is None):
        raise click.UsageError("give exactly one of --weights or --pred")
    _echo_config("eval", dataset=dataset, weights=weights, pred=pred, threshold=threshold)
    ds = dio.load_dataset(dataset)
    if weights is not None:
        probs = predict_dataset(dio.load_weights(weights), ds)
        bits = (probs >= threshold).astype(np.uint8)
    else:
        rows = read_partition_file(pred)
        if len(rows) != len(ds):
            raise DataError(f"{len(rows)} prediction lines for {len(ds)} dataset records")
        bits = np.array([label.array() for _, _, label in rows])
    acc = level_accuracy(bits, ds.labels)
    click.echo("L1 L2 L3 overall")
    click.echo(" ".join(acc.as_row()))


@cli.command()
@click.option("--pred", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--yuv", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Optional luminance backdrop (needs --width/--height).")
@click.option("--width", type=click.IntRange(min=2))
@click.option("--height", type=click.IntRange(min=2))
def viz(pred, out, yuv, width, height):
    """Render CU boundaries as a binary PPM image."""
    _echo_config("viz", pred=pred, out=out, yuv=yuv, width=width, height=height)
    rows = read_partition_file(pred)
    if yuv is not None:
        if width is None or height is None:
            raise click.UsageError("--yuv needs --width and --height")
        luma = dio.read_yuv_frames(yuv, width, height, 1)[0]
    else:
        w = width or max((x for x, _, _ in rows), default=0) + 64
        h = height or max((y for _, y, _ in rows), default=0) + 64
        luma = np.full((h, w), 96, dtype=np.uint8)
    dio.atomic_write(out, render_ppm(luma, rows))


def render_ppm(luma: np.ndarray, rows) -> bytes:
    """CU boundaries in red over a grey luminance backdrop, cropped to the frame."""
    h, w = luma.shape
    rgb = np.repeat(luma[..., None], 3, axis=2)
    for x, y, label in rows:
        boundary, _ = rasterize(tree_from_bits(label.bits))
        sub = boundary[:max(0, min(64, h - y)), :max(0, min(64, w - x))]
        region = rgb[y:y + sub.shape[0], x:x + sub.shape[1]]
        region[sub] = (255, 0, 0)
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


@cli.command()
@click.option("--weights", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
def inspect(weights):
    """Print the embedded config and parameter / FLOP accounting."""
    model = dio.load_weights(weights)
    config = model.config
    total = count_params(config)
    click.echo(json.dumps(config.to_dict(), sort_keys=True))
    for key, value in param_ledger(config).items.items():
        click.echo(f"  {key:32s} {int(value):>10d}")
    click.echo(f"parameters {total}")
    click.echo(f"gflops_per_ctu {count_flops(config):.6f}")
    if total != model.num_parameters():
        raise DataError(f"stored tensors hold {model.num_parameters()} parameters, config implies {total}")


# ----------------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        threads = _threads()
        limit = threadpool_limits(threads) if threads else contextlib.nullcontext()
        with limit:
            cli.main(args=argv, prog_name="hfvit", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_DATA
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        return EXIT_NUMERIC
    except (HfvitError, OSError, ValueError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
