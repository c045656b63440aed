"""Command-line entry points.

Subcommands: train, sample, eval, decompose, analyze cost, analyze
metrics, gradcheck, gen-data, bench. Exit codes: 0 success, 2
configuration error, 3 numerical divergence. LAPFLOW_SEED overrides the
config seed.
"""

import argparse
import csv
import functools
import json
import os
import sys
import time

import numpy as np

from . import __version__, analysis, baselines, checkpoint, datasets, flowtrain
from . import images as im
from . import kernels, model, numerics, pyramid, runconfig, sampler, schedule
from .flowtrain import DivergenceError
from .odesolve import OdeDivergence
from .rng import Rng
from .runconfig import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_OK
    try:
        return args.func(args) or EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, IOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, OdeDivergence, FloatingPointError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def build_parser():
    p = argparse.ArgumentParser(prog="lapflow",
                                description="Laplacian multi-scale flow matching")
    p.add_argument("--version", action="version", version=f"lapflow {__version__}")
    sub = p.add_subparsers(dest="command")
    p.set_defaults(command=None)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--method", choices=runconfig.METHODS,
                   help="override the config's method")
    t.add_argument("--out", help="checkpoint path (default <out_dir>/model.ckpt)")
    t.add_argument("--dry-run", action="store_true",
                   help="print the resolved config and cost report, then exit")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample images from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--cfg", type=float, default=1.0, help="guidance scale (1 = off)")
    s.add_argument("--label", type=int, default=None)
    s.add_argument("--out", default="grid.png")
    s.add_argument("--solver", choices=("euler", "heun", "dopri5"), default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--rtol", type=float, default=None)
    s.add_argument("--atol", type=float, default=None)
    s.add_argument("--raw", action="store_true",
                   help="use raw weights instead of the EMA shadow")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="sample a checkpoint and score it against "
                                    "its training dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--n", type=int, default=256)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default="metrics.csv")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decompose", help="write per-level pyramid PNGs of an image")
    d.add_argument("--input", required=True)
    d.add_argument("--levels", type=int, required=True)
    d.add_argument("--out-dir", required=True)
    d.set_defaults(func=cmd_decompose)

    a = sub.add_parser("analyze", help="cost model and sample metrics")
    asub = a.add_subparsers(dest="analyze_command", required=True)
    ac = asub.add_parser("cost", help="time-weighted attention cost table")
    ac.add_argument("--n-tokens", type=int, required=True,
                    help="finest-scale token count N")
    ac.add_argument("--d", type=int, required=True, help="hidden width")
    ac.add_argument("--scales", type=int, required=True)
    ac.add_argument("--times", default="",
                    help="comma-separated critical times, finest first")
    ac.set_defaults(func=cmd_analyze_cost)
    am = asub.add_parser("metrics", help="distance metrics between two PNG sets")
    am.add_argument("--real", required=True)
    am.add_argument("--fake", required=True)
    am.add_argument("--out", default="metrics.csv")
    am.add_argument("--n-proj", type=int, default=128)
    am.set_defaults(func=cmd_analyze_metrics)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    gd = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    gd.add_argument("--kind", default="gaussians",
                    choices=("gaussians", "checkerboard", "textures"))
    gd.add_argument("--size", type=int, default=16)
    gd.add_argument("--channels", type=int, default=1)
    gd.add_argument("--count", type=int, default=1024)
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--num-classes", type=int, default=0)
    gd.add_argument("--out", required=True)
    gd.add_argument("--preview", help="optional grid PNG of the first samples")
    gd.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("bench", help="compare kernel backends")
    b.add_argument("--repeats", type=int, default=50)
    b.set_defaults(func=cmd_bench)
    return p


# ---------------------------------------------------------------------------
# train / sample / eval
# ---------------------------------------------------------------------------

def _load_run_config(args):
    with open(args.config) as f:
        raw = json.load(f)
    if args.method:
        raw["method"] = args.method
    return runconfig.from_dict(raw)


def _specs_for(cfg: runconfig.RunConfig):
    """(schedule-like spec, group_fn, check_contract) for cfg.method."""
    if cfg.method in ("lapflow", "lfm"):
        group = functools.partial(
            flowtrain.lapflow_groups,
            independent_scale_noise=cfg.independent_scale_noise)
        return cfg.schedule, group, True
    if cfg.method == "edify":
        return cfg.edify_spec(), baselines.edify_groups, False
    return cfg.pyramidal_spec(), baselines.pf_groups, False


def cmd_train(args):
    try:
        cfg = _load_run_config(args)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    spec, group_fn, contract = _specs_for(cfg)
    flops = analysis.model_flops(cfg.model, cfg.schedule)
    if args.dry_run:
        print(json.dumps(cfg.resolved, indent=2, sort_keys=True))
        _print_flops(flops)
        return EXIT_OK

    os.makedirs(cfg.out_dir, exist_ok=True)
    runconfig.write_resolved(cfg, os.path.join(cfg.out_dir, "resolved_config.json"))
    images_arr, labels = datasets.gen_dataset(cfg.dataset)
    ckpt_path = args.out or os.path.join(cfg.out_dir, "model.ckpt")
    meta = {"method": cfg.method, "dataset": cfg.dataset.to_dict(),
            "seed": cfg.seed}

    def save_ckpt(ts):
        ema = {n: numerics.Tensor(a) for n, a in ts.ema.items()}
        checkpoint.save(ckpt_path, ts.params, cfg.model, cfg.schedule,
                        ema=ema, meta={**meta, "step": ts.step,
                                       "kernel_backend": kernels.backend_name()})

    start = time.perf_counter()
    ts = flowtrain.train_loop(
        cfg.model, spec, cfg.train, images_arr, labels=labels,
        group_fn=group_fn, check_contract=contract,
        log_path=os.path.join(cfg.out_dir, "train_log.csv"),
        on_checkpoint=save_ckpt,
        progress=lambda step, loss: print(
            f"step {step:>7d}  loss {loss:.5f}", flush=True))
    print(f"trained {ts.step} steps in {time.perf_counter() - start:.1f}s "
          f"-> {ckpt_path}")

    if cfg.sample.count > 0:
        out_png = os.path.join(cfg.out_dir, "samples.png")
        imgs, info = _sample_with_method(ckpt_path, cfg.sample, cfg.method,
                                         independent=cfg.independent_scale_noise,
                                         jump_mode=cfg.resolved["sample"]["jump_mode"])
        im.save_grid(out_png, imgs)
        with open(out_png + ".json", "w") as f:
            json.dump(info, f, indent=2)
        _write_metric_csv(os.path.join(cfg.out_dir, "metrics.csv"),
                          images_arr, imgs, cfg.seed)
        print(f"wrote {out_png} and metrics.csv (nfe={info['nfe_total']})")
    return EXIT_OK


def _print_flops(flops):
    print(f"forward MACs (all scales active): {flops.forward_macs_full:,} "
          f"({flops.forward_flops_full / 1e9:.4f} GFLOPs)")
    for row in flops.per_segment:
        print(f"  segment {row['segment']}: dt={row['dt']:.4f} "
              f"macs={row['macs']:,}")
    print(f"time-weighted MACs/eval: {flops.time_weighted_macs:,.0f}")
    print(f"attention cost ratio vs single-scale: {flops.attention_ratio:.6f}")


def _pick_params(ckpt_path, use_ema):
    params, ema, mcfg, spec, meta = checkpoint.load(ckpt_path)
    chosen = ema if (use_ema and ema is not None) else params
    return chosen, mcfg, spec, meta


def _sample_with_method(ckpt_path, scfg, method, independent=False,
                        jump_mode="algorithmic"):
    params, mcfg, spec, meta = _pick_params(ckpt_path, scfg.use_ema)
    rng = Rng(scfg.seed).stream("sample")
    if method in ("lapflow", "lfm"):
        return sampler.generate(params, mcfg, spec, scfg, rng,
                                independent_scale_noise=independent)
    label = None
    if mcfg.conditional:
        label = np.broadcast_to(np.asarray(scfg.label, dtype=np.intp),
                                (scfg.count,)).copy()
    if method == "edify":
        t = spec.critical_times if hasattr(spec, "critical_times") else None
        espec = baselines.EdifySpec(t1=t[0], t2=t[1]) if t else baselines.EdifySpec()
        return baselines.edify_sample(params, mcfg, espec, scfg.count, rng,
                                      solver=scfg.solver, rtol=scfg.rtol,
                                      atol=scfg.atol, steps=scfg.steps,
                                      label=label)
    pspec = baselines.PyramidalSpec(K=mcfg.scales,
                                    boundaries=spec.critical_times)
    return baselines.pf_sample(params, mcfg, pspec, scfg.count, rng,
                               solver=scfg.solver, rtol=scfg.rtol,
                               atol=scfg.atol, steps=scfg.steps, label=label,
                               jump_mode=jump_mode)


def _sample_config_from_args(args, meta):
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get("LAPFLOW_SEED", meta.get("seed", 0)))
    return sampler.SampleConfig(
        count=args.n, seed=seed, cfg_scale=args.cfg, label=args.label,
        solver=args.solver or "dopri5", steps=args.steps or 100,
        rtol=args.rtol or 1e-5, atol=args.atol or 1e-5,
        use_ema=not args.raw)


def cmd_sample(args):
    _, _, _, meta = checkpoint.load(args.ckpt)
    scfg = _sample_config_from_args(args, meta)
    method = meta.get("method", "lapflow")
    imgs, info = _sample_with_method(args.ckpt, scfg, method)
    im.save_grid(args.out, imgs)
    stem, _ = os.path.splitext(args.out)
    for i in range(len(imgs)):
        im.save_png(f"{stem}_{i:03d}.png", im.to_uint8(imgs[i]))
    with open(args.out + ".json", "w") as f:
        json.dump({**info, "seed": scfg.seed, "count": scfg.count,
                   "method": method}, f, indent=2)
    print(f"wrote {args.out} (+{len(imgs)} singles, nfe={info['nfe_total']})")
    return EXIT_OK


def _write_metric_csv(path, real, fake, seed, n_proj=128):
    swd = analysis.sliced_wasserstein(real, fake, n_proj=n_proj,
                                      rng=Rng(seed).stream("metrics"))
    spec_real = analysis.spectrum_stats(real)
    spec_fake = analysis.spectrum_stats(fake)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["sliced_wasserstein", f"{swd:.8g}"])
        for i, (r, g) in enumerate(zip(spec_real, spec_fake)):
            w.writerow([f"spectrum_band{i}_real", f"{r:.8g}"])
            w.writerow([f"spectrum_band{i}_fake", f"{g:.8g}"])
    return swd


def cmd_eval(args):
    params, ema, mcfg, spec, meta = checkpoint.load(args.ckpt)
    if "dataset" not in meta:
        raise ConfigError("checkpoint carries no dataset descriptor; "
                          "use 'analyze metrics' with explicit directories")
    desc = datasets.DatasetDescriptor(**meta["dataset"])
    real, _ = datasets.gen_dataset(desc)
    seed = args.seed if args.seed is not None else meta.get("seed", 0)
    scfg = sampler.SampleConfig(count=args.n, seed=seed,
                                label=0 if mcfg.conditional else None)
    imgs, info = _sample_with_method(args.ckpt, scfg, meta.get("method", "lapflow"))
    swd = _write_metric_csv(args.out, real[: max(args.n, 64)], imgs, seed)
    print(f"sliced_wasserstein={swd:.6g} nfe={info['nfe_total']} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# decompose / analyze / gradcheck / gen-data / bench
# ---------------------------------------------------------------------------

def cmd_decompose(args):
    arr = im.load_png(args.input)
    x = im.from_uint8(arr)
    levels = args.levels
    os.makedirs(args.out_dir, exist_ok=True)
    pyr = pyramid.decompose(numerics.Tensor(x[None]), levels)
    sidecar = []
    for k, lvl in enumerate(pyr):
        data = lvl.data[0]
        lo, hi = float(data.min()), float(data.max())
        span = (hi - lo) or 1.0
        mapped = np.round((data - lo) / span * 255).astype(np.uint8)
        out = mapped[0] if mapped.shape[0] == 1 else mapped.transpose(1, 2, 0)
        path = os.path.join(args.out_dir, f"level_{k}.png")
        im.save_png(path, out)
        sidecar.append({"level": k, "file": os.path.basename(path),
                        "shape": list(data.shape), "min": lo, "max": hi,
                        "mapping": "uint8 = round((x - min) / (max - min) * 255)"})
    with open(os.path.join(args.out_dir, "levels.json"), "w") as f:
        json.dump({"input": args.input, "levels": sidecar}, f, indent=2)
    print(f"wrote {levels} levels to {args.out_dir}")
    return EXIT_OK


def cmd_analyze_cost(args):
    times = tuple(float(v) for v in args.times.split(",") if v.strip())
    if not times and args.scales > 1:
        times = schedule.default_critical_times(args.scales)
    try:
        spec = schedule.ScheduleSpec(K=args.scales, critical_times=times)
        report = analysis.attention_cost(args.n_tokens, args.d, spec)
    except ValueError as exc:
        raise ConfigError(str(exc))
    print(f"{'segment':>8} {'tokens':>8} {'dt':>8} {'cost share':>14}")
    for row in report.rows():
        print(f"{row['segment']:>8d} {row['tokens']:>8d} {row['dt']:>8.4f} "
              f"{row['share']:>14.4g}")
    print(f"time-weighted cost: {report.cost:.6g}")
    print(f"single-scale baseline (N^2 d): {report.baseline:.6g}")
    print(f"ratio: {report.ratio:.10f}")
    return EXIT_OK


def _load_png_set(dirname):
    files = sorted(f for f in os.listdir(dirname) if f.lower().endswith(".png"))
    if not files:
        raise ConfigError(f"{dirname}: no PNG files")
    arrs = [im.from_uint8(im.load_png(os.path.join(dirname, f))) for f in files]
    return np.stack(arrs)


def cmd_analyze_metrics(args):
    real = _load_png_set(args.real)
    fake = _load_png_set(args.fake)
    swd = _write_metric_csv(args.out, real, fake, seed=0, n_proj=args.n_proj)
    print(f"sliced_wasserstein={swd:.6g} -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .numerics import Tensor, grad_check
    from . import numerics as nm
    rng = Rng(0)
    checks = []

    w = Tensor(rng.normal((6, 6), dtype=np.float64))
    mask = np.zeros((1, 6))
    mask[0, -1] = -np.inf

    def composite(x):
        h = nm.softmax_masked(nm.gelu(nm.layernorm(nm.matmul(x, w))), mask)
        return nm.tmean(nm.mul(h, h))

    checks.append(("primitive composite",
                   grad_check(composite, Tensor(rng.normal((4, 6), dtype=np.float64)))))

    mcfg = model.ModelConfig(scales=2, hidden=8, heads=2, depth=1, patch=2,
                             channels=1, input_size=8)
    params = model.init_params(mcfg, rng.stream("m"), dtype=np.float64)
    model.randomize_params(params, rng.stream("r"), std=0.2)

    def net(x1, x0):
        state = model.FlowState(tensors={1: x1, 0: x0}, t=np.array([0.8]))
        v = model.forward(params, mcfg, state)
        return nm.add(nm.tsum(nm.mul(v[0], v[0])), nm.tsum(nm.mul(v[1], v[1])))

    x1 = Tensor(rng.normal((1, 1, 4, 4), dtype=np.float64))
    x0 = Tensor(rng.normal((1, 1, 8, 8), dtype=np.float64))
    checks.append(("model inputs end-to-end", grad_check(net, [x1, x0], h=1e-6)))

    ok = True
    for name, err in checks:
        status = "ok" if err <= args.tol else "FAIL"
        ok &= err <= args.tol
        print(f"{status:>4}  {name}: max rel err {err:.3e} (tol {args.tol:g})")
    return EXIT_OK if ok else 1


def cmd_gen_data(args):
    desc = datasets.DatasetDescriptor(kind=args.kind, size=args.size,
                                      channels=args.channels, count=args.count,
                                      seed=args.seed, num_classes=args.num_classes)
    imgs, labels = datasets.gen_dataset(desc)
    payload = {"images": imgs, "descriptor": json.dumps(desc.to_dict())}
    if labels is not None:
        payload["labels"] = labels
    np.savez(args.out, **payload)
    if args.preview:
        im.save_grid(args.preview, imgs[:64])
    print(f"wrote {imgs.shape} to {args.out}")
    return EXIT_OK


def cmd_bench(args):
    from .kernels import available_backends, numpy_backend, use
    try:
        from .kernels import _core
    except ImportError:
        _core = None
    rng = Rng(0)
    sizes = {"softmax rows 5184x81": ("masked_softmax_fw",
                                      (rng.normal((64 * 81, 81), dtype=np.float32),
                                       np.zeros((81, 81), dtype=np.float32))),
             "layernorm 4096x64": ("layernorm_fw",
                                   (rng.normal((4096, 64), dtype=np.float32), 1e-6)),
             "gelu 1M": ("gelu_fw", (rng.normal((2 ** 20,), dtype=np.float32),))}
    print(f"available backends: {available_backends()}")
    for label, (fn, fargs) in sizes.items():
        row = [label]
        for name, mod in (("numpy", numpy_backend), ("compiled", _core)):
            if mod is None:
                row.append("n/a")
                continue
            f = getattr(mod, fn)
            f(*fargs)
            t0 = time.perf_counter()
            for _ in range(args.repeats):
                f(*fargs)
            dt = (time.perf_counter() - t0) / args.repeats
            row.append(f"{dt * 1e3:8.3f} ms")
        print(f"{row[0]:<24} numpy {row[1]}   compiled {row[2]}")

    # one full training step per backend
    mcfg = model.ModelConfig(scales=2, hidden=64, heads=4, depth=4, patch=2,
                             channels=1, input_size=16)
    spec = schedule.ScheduleSpec(K=2, critical_times=(0.5,))
    tcfg = flowtrain.TrainConfig(batch_size=16, steps=10 ** 9, seed=0,
                                 lr_schedule="constant", ema_decay=0.999)
    x1 = rng.stream("bench").normal((16, 1, 16, 16), dtype=np.float32)
    for backend in available_backends():
        use(backend)
        ts = flowtrain.init_train_state(mcfg, tcfg)
        flowtrain.train_step(ts, x1, None, mcfg, spec, tcfg)  # warm-up
        t0 = time.perf_counter()
        reps = max(3, args.repeats // 10)
        for _ in range(reps):
            flowtrain.train_step(ts, x1, None, mcfg, spec, tcfg)
        dt = (time.perf_counter() - t0) / reps
        print(f"train step (B=16, d=64, depth=4) [{backend}]: {dt * 1e3:.1f} ms")
    use("auto" if "compiled" in available_backends() else "numpy")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
