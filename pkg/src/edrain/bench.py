"""Wall-clock latency of the derain pipeline, split into stages."""
from __future__ import annotations

import time

import numpy as np

from .errors import InvalidArgument
from .filtering import fuse_scales, pixel_wise_dilated_filter, pixel_wise_filter
from .kpn import derain, kpn_forward

STAGES = ("kpn_forward", "filtering", "end_to_end")


def _time(fn, repetitions, warmup):
    for _ in range(warmup):
        fn()
    out = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out * 1e3


def _time_interleaved(fns, repetitions, warmup):
    """Round-robin timing so clock drift and background load hit every function alike."""
    for _ in range(warmup):
        for fn in fns:
            fn()
    out = np.empty((len(fns), repetitions))
    for i in range(repetitions):
        for j, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn()
            out[j, i] = time.perf_counter() - t0
    return out * 1e3


def _stats(ms):
    return {"median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95))}


def benchmark_latency(params, size=64, repetitions=100, warmup=5, seed=0):
    """Median / p95 milliseconds for each stage on a random ``size`` x ``size`` image.

    Stages: ``kpn_forward`` (kernel prediction), ``filtering`` (every dilated
    filter plus fusion) and ``end_to_end``. Also reports each dilation's
    filter on its own and ``filtering_delta_ms``: the extra cost of the
    multi-scale filtering over a single undilated filter.
    """
    if repetitions < 10:
        raise InvalidArgument(f"repetitions must be >= 10, got {repetitions}")
    h, w = (size, size) if np.isscalar(size) else size
    cfg = params.config
    rng = np.random.Generator(np.random.Philox(seed))
    image = rng.random((1, cfg.input_channels, h, w)).astype(params.dtype)
    kernels = kpn_forward(params, image)
    fusion = params.fusion

    def filtering():
        return fuse_scales([pixel_wise_dilated_filter(image, kernels, l) for l in cfg.dilations], fusion)

    stages = {
        "kpn_forward": _stats(_time(lambda: kpn_forward(params, image), repetitions, warmup)),
        "filtering": _stats(_time(filtering, repetitions, warmup)),
        "end_to_end": _stats(_time(lambda: derain(params, image), repetitions, warmup)),
    }
    fns = [lambda: pixel_wise_filter(image, kernels)]
    fns += [lambda l=l: pixel_wise_dilated_filter(image, kernels, l) for l in cfg.dilations]
    ms = _time_interleaved(fns, repetitions, warmup)
    single = _stats(ms[0])
    per_l = {l: _stats(row) for l, row in zip(cfg.dilations, ms[1:])}
    return {
        "size": [h, w],
        "repetitions": repetitions,
        "dtype": str(params.dtype),
        "stages": stages,
        "single_filter": single,
        "per_dilation": {str(l): v for l, v in per_l.items()},
        "filtering_delta_ms": stages["filtering"]["median_ms"] - single["median_ms"],
    }


def _filter_fns(size, dilations, kernel_width, channels, dtype, seed):
    h, w = (size, size) if np.isscalar(size) else size
    rng = np.random.Generator(np.random.Philox(seed))
    image = rng.random((1, channels, h, w)).astype(dtype)
    kernels = rng.standard_normal((1, kernel_width**2, h, w)).astype(dtype)
    return [lambda l=l: pixel_wise_dilated_filter(image, kernels, l) for l in dilations]


def filter_timings(size, dilations=(1, 2, 3, 4), kernel_width=5, channels=3, repetitions=30, warmup=3,
                   dtype=np.float32, seed=0):
    """Median ms of ``pixel_wise_dilated_filter`` per dilation on random inputs."""
    fns = _filter_fns(size, dilations, kernel_width, channels, dtype, seed)
    ms = _time_interleaved(fns, repetitions, warmup)
    return {l: float(np.median(row)) for l, row in zip(dilations, ms)}


def filtering_scaling(size, repetitions=30, warmup=3, rounds=5, dilations=(1, 2, 3, 4), kernel_width=5,
                      channels=3, dtype=np.float32, seed=0):
    """Time ratio of the filtering stage (all dilations summed) at ``2*size`` versus ``size``.

    Sizes are timed in alternating blocks, so each block runs with warm caches
    while slow drift in machine load cancels; the median ratio over ``rounds``
    is returned.
    """
    h, w = (size, size) if np.isscalar(size) else size
    small = _filter_fns((h, w), dilations, kernel_width, channels, dtype, seed)
    large = _filter_fns((2 * h, 2 * w), dilations, kernel_width, channels, dtype, seed)
    ratios = []
    for _ in range(rounds):
        t_small = np.median(_time_interleaved(small, repetitions, warmup), axis=1).sum()
        t_large = np.median(_time_interleaved(large, repetitions, warmup), axis=1).sum()
        ratios.append(t_large / t_small)
    return float(np.median(ratios))


def format_report(report):
    lines = [f"latency on {report['size'][0]}x{report['size'][1]} ({report['dtype']}, {report['repetitions']} reps)"]
    for name in STAGES:
        s = report["stages"][name]
        lines.append(f"  {name:<12} median {s['median_ms']:8.3f} ms   p95 {s['p95_ms']:8.3f} ms")
    for l, s in report["per_dilation"].items():
        lines.append(f"  filter l={l:<3}   median {s['median_ms']:8.3f} ms")
    lines.append(f"  multi-scale filtering + fusion over a single filter: {report['filtering_delta_ms']:+.3f} ms")
    return "\n".join(lines)
