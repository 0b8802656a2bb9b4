"""Training loop (with optional RainMix augmentation) and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .data import crop_to, pad_to_multiple, random_crop_pair
from .errors import InvalidArgument, InvalidState, TrainingDiverged
from .imageio import dequantize, quantize
from .kpn import KpnParams, derain, derain_backward, derain_forward, kpn_init
from .losses import combined_loss, combined_loss_backward, l1_loss, psnr, ssim
from .rainmix import composite_rainy, rain_mix
from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ["iteration", "loss", "l1", "ssim", "batch_psnr", "heldout_psnr"]


def worker_count():
    try:
        return max(1, int(os.environ.get("EDRAIN_THREADS", "1")))
    except ValueError:
        return 1


def sample_rng(seed, iteration, index):
    """Independent stream per (seed, iteration, sample); order of evaluation never matters."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, iteration, index])))


def _prepare_sample(pairs, config, streaks, iteration, index):
    rng = sample_rng(config.seed, iteration, index)
    k = int(rng.integers(len(pairs)))
    rainy, clean = random_crop_pair(pairs.rainy[k], pairs.clean[k], config.crop_size, rng)
    if config.rainmix_enabled:
        rain = rain_mix(streaks, rng)
        base = rainy if rng.random() < 0.5 else clean
        rainy = composite_rainy(base, rain)
    return rainy, clean


def prepare_batch(pairs, config, streaks, iteration, dtype=np.float64):
    """Stacked ``(inputs, targets)`` for one training iteration."""
    idx = range(config.batch_size)
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda b: _prepare_sample(pairs, config, streaks, iteration, b), idx))
    else:
        samples = [_prepare_sample(pairs, config, streaks, iteration, b) for b in idx]
    inputs = np.stack([s[0] for s in samples]).astype(dtype)
    targets = np.stack([s[1] for s in samples]).astype(dtype)
    return inputs, targets


def _heldout_crop(pairs, crop):
    r, c = pairs.rainy[0], pairs.clean[0]
    h, w = r.shape[-2:]
    size = min(crop, h, w)
    y, x = (h - size) // 2, (w - size) // 2
    return r[None, :, y : y + size, x : x + size], c[None, :, y : y + size, x : x + size]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list = field(default_factory=list)

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]


def format_log_header(config):
    return "".join(f"# {line}\n" for line in config.header_lines()) + ",".join(LOG_COLUMNS) + "\n"


def _format_row(row):
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    return ",".join(fmt(row[c]) for c in LOG_COLUMNS) + "\n"


def train(
    config,
    dataset,
    streaks=None,
    *,
    val=None,
    out_dir=None,
    log_path=None,
    resume=None,
    stop_at=None,
):
    """Train the kernel prediction network and fusion layer.

    Each iteration draws ``batch_size`` random crops; with RainMix enabled a
    fresh rain map is composited onto either the rainy or the clean image
    (probability 1/2 each). Returns a :class:`TrainResult` whose ``rows`` are
    the per-iteration metrics also written to ``log_path`` as CSV.
    """
    if not isinstance(config, TrainConfig):
        raise InvalidArgument("config must be a TrainConfig")
    pairs = dataset.load()
    if len(pairs) == 0:
        raise InvalidState("dataset is empty")
    if config.rainmix_enabled and (streaks is None or len(streaks) == 0):
        raise InvalidState("RainMix is enabled but no rain-streak set was provided")
    dtype = np.dtype(config.precision)
    channels = pairs.rainy[0].shape[0]
    kcfg = config.kpn_config(channels)

    if resume is not None:
        if resume.params.config != kcfg:
            raise InvalidArgument("checkpoint network config does not match the training config")
        params = resume.params.astype(dtype)
        adam = resume.adam
        start = resume.iteration
    else:
        params = kpn_init(kcfg, config.seed, dtype)
        adam = None
        start = 0
    if adam is None:
        adam = AdamState.zeros_like(params.arrays(), lr=config.lr)

    total = config.total_iterations(len(pairs))
    end = total if stop_at is None else min(stop_at, total)
    lcfg = config.loss_config()
    held_pairs = (val.load() if val is not None else pairs)
    held_in, held_target = (a.astype(dtype) for a in _heldout_crop(held_pairs, config.crop_size))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    logfh = None
    if log_path:
        logfh = open(log_path, "w", encoding="utf-8", newline="")
        logfh.write(format_log_header(config))
    rows = []

    def snapshot(iteration):
        return Checkpoint(
            params=params,
            adam=adam,
            iteration=iteration,
            rng_state={"generator": "philox-seedsequence", "seed": config.seed, "next_iteration": iteration},
            train_config=config.to_dict(),
        )

    try:
        for it in range(start, end):
            inputs, targets = prepare_batch(pairs, config, streaks, it, dtype)
            out, cache = derain_forward(params, inputs)
            loss = combined_loss(out, targets, lcfg)
            if not math.isfinite(loss):
                dump = os.path.join(out_dir or tempfile.gettempdir(), f"diverged_iter{it:06d}.npz")
                np.savez(dump, inputs=inputs, targets=targets, outputs=out)
                raise TrainingDiverged(f"non-finite loss {loss} at iteration {it}; batch saved to {dump}", dump)
            grad = combined_loss_backward(out, targets, lcfg).astype(dtype, copy=False)
            grads = derain_backward(params, cache, grad)
            arrays, adam = adam_step(params.arrays(), grads, adam)
            params = params.with_arrays(arrays)

            heldout = None
            if config.eval_interval and (it % config.eval_interval == 0 or it == end - 1):
                heldout = psnr(derain(params, held_in), held_target)
            row = {
                "iteration": it,
                "loss": loss,
                "l1": l1_loss(out, targets),
                "ssim": ssim(out, targets, lcfg.ssim) if lcfg.ssim_enabled else None,
                "batch_psnr": psnr(out, targets),
                "heldout_psnr": heldout,
            }
            rows.append(row)
            if logfh:
                logfh.write(_format_row(row))
            if out_dir and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{it + 1:06d}.edrn"), snapshot(it + 1))
            if it % 100 == 0:
                log.info("iter %d loss %.5f", it, loss)
    finally:
        if logfh:
            logfh.close()

    final = snapshot(end)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.edrn"), final)
    return TrainResult(final, rows)


def read_metrics_log(path):
    """Parse a metrics CSV back into ``(header_lines, rows)``."""
    header, body = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            (header if line.startswith("#") else body).append(line)
    rows = list(csv.DictReader(io.StringIO("".join(body))))
    return [h[2:].rstrip("\n") for h in header], rows


def derain_image(params, image):
    """Derain one (C, H, W) image of any size; pads to the network multiple and crops back."""
    dtype = params.dtype
    padded, hw = pad_to_multiple(np.asarray(image), params.config.multiple)
    if padded.shape[0] != params.config.input_channels:
        raise InvalidArgument(
            f"image has {padded.shape[0]} channels, checkpoint expects {params.config.input_channels}"
        )
    out = derain(params, padded[None].astype(dtype))[0]
    return crop_to(out, hw)


@dataclass
class EvalReport:
    rows: list  # (name, psnr, ssim)

    @property
    def mean_psnr(self):
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r[2] for r in self.rows]))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "psnr", "ssim"])
        for name, p, s in self.rows:
            w.writerow([name, f"{p:.6f}", f"{s:.6f}"])
        w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()

    def summary(self):
        return f"{len(self.rows)} images  mean PSNR {self.mean_psnr:.3f} dB  mean SSIM {self.mean_ssim:.4f}"


def _as_params(model):
    if model is None or isinstance(model, KpnParams):
        return model
    if isinstance(model, Checkpoint):
        return model.params
    raise InvalidArgument(f"expected KpnParams, Checkpoint or None, got {type(model).__name__}")


def evaluate(model, dataset):
    """Per-image PSNR/SSIM of ``model``'s output against the clean images.

    Outputs are quantised to 8 bits before scoring. ``model=None`` scores the
    rainy inputs as they are, which gives the no-deraining baseline.
    """
    params = _as_params(model)
    pairs = dataset.load()
    rows = []
    for name, rainy, clean in zip(pairs.names, pairs.rainy, pairs.clean):
        pred = rainy if params is None else derain_image(params, rainy)
        pred = dequantize(quantize(pred))
        target = dequantize(quantize(clean))
        rows.append((name, psnr(pred, target), ssim(pred, target)))
    return EvalReport(rows)
