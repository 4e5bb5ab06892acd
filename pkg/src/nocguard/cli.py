"""Command-line entry point wiring the whole workbench together.

Subcommands: topo, simulate, gen-dataset, train, eval, infer, experiment,
self-test. Exit codes: 0 success, 2 configuration error, 3 I/O or file
format error, 4 validation/domain error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, dataset as ds_mod, inference, model as model_mod
from . import nncore, simulator as sim_mod, topology as topo_mod
from .errors import ConfigError, IOFormatError, NocGuardError

EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION = 2, 3, 4


def _data_dir():
    return os.environ.get("NOCGUARD_DATA_DIR", ".")


def _resolve(path):
    if os.path.isabs(path):
        return path
    return os.path.join(_data_dir(), path)


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _topology_from_doc(doc):
    kind = doc.get("kind", "mesh2d")
    n = int(doc.get("n", 8))
    if kind == topo_mod.MESH2D:
        return topo_mod.build_mesh_2d(n)
    if kind == topo_mod.MESH3D:
        return topo_mod.build_mesh_3d(n)
    raise ConfigError(f"unknown topology kind {kind!r}")


def _sim_config_from_doc(doc, seed):
    topo = _topology_from_doc(doc.get("topology", {}))
    prof = sim_mod.benign_profile(doc.get("profile", "uniform-low"), topo)
    attack = None
    if doc.get("attack"):
        a = doc["attack"]
        attack = sim_mod.AttackConfig(tuple(a["mips"]), tuple(a["vips"]),
                                      float(a["pir"]), int(a.get("start_cycle", 0)))
    return sim_mod.SimConfig(topo, int(doc.get("duration", 2500)), prof, attack,
                             int(doc.get("buffer_depth", 4)), seed)


# -- subcommand handlers ------------------------------------------------------

def cmd_topo(args):
    if args.kind == topo_mod.MESH2D:
        topo = topo_mod.build_mesh_2d(args.n)
    else:
        topo = topo_mod.build_mesh_3d(args.n)
    with open(_resolve(args.out), "w") as fh:
        fh.write(topo.to_json() + "\n")
    print(f"wrote {args.out}: {topo.kind} n={topo.n} N={topo.num_nodes} "
          f"edges={len(topo.edges)} mc={list(topo.mc_nodes)}")
    return 0


def cmd_simulate(args):
    doc = _load_json(_resolve(args.config))
    cfg = _sim_config_from_doc(doc, args.seed)
    trace = sim_mod.run_scenario(cfg)
    sim_mod.save_trace(trace, _resolve(args.out))
    s = trace.stats
    print(f"wrote {args.out}: injected={s.injected_flits} ejected={s.ejected_flits} "
          f"starved={s.starved_flits}")
    return 0


def cmd_gen_dataset(args):
    doc = _load_json(_resolve(args.config))
    topo = _topology_from_doc(doc.get("topology", {}))
    base = sim_mod.SimConfig(
        topo, int(doc.get("duration", 2500)),
        sim_mod.benign_profile(doc.get("profiles", ["uniform-low"])[0], topo),
        None, int(doc.get("buffer_depth", 4)), args.seed)
    ds = ds_mod.generate_dataset(
        doc.get("profiles", list(sim_mod.PROFILE_NAMES)),
        int(doc.get("mappings_per_profile", 8)), base,
        l=int(doc.get("l", 400)), seed=args.seed,
        n_mips=int(doc.get("n_mips", 3)), pir=float(doc.get("pir", 0.05)),
        train_fraction=float(doc.get("train_fraction", 0.9)),
        workers=args.threads)
    ds_mod.save_dataset(ds, _resolve(args.out))
    print(f"wrote {args.out}: {len(ds.graphs)} graphs "
          f"({len(ds.train_idx)} train / {len(ds.test_idx)} test)")
    return 0


def cmd_train(args):
    doc = _load_json(_resolve(args.config)) if args.config else {}
    ds = ds_mod.load_dataset(_resolve(args.data))
    mdoc = dict(doc.get("model", {}))
    for key in ("conv_channels", "conv_kernels", "conv_strides", "pool_kernels",
                "pool_strides", "graph_widths", "fc_widths"):
        if key in mdoc:
            mdoc[key] = tuple(mdoc[key])
    if args.f64:
        mdoc["dtype"] = "f64"
    mdoc.setdefault("series_len", ds.series_len)
    cfg = model_mod.ModelConfig(**mdoc)
    tc = model_mod.TrainConfig(seed=args.seed, **doc.get("train", {}))
    m = model_mod.build_model(cfg, seed=args.seed)
    m, history = model_mod.train(m, ds, tc)
    model_mod.save_checkpoint(m, _resolve(args.out))
    if args.history:
        with open(_resolve(args.history), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
            w.writeheader()
            w.writerows(history)
    print(f"wrote {args.out}: {len(history)} epochs, "
          f"best val loss {m.meta['best_val_loss']:.6f}")
    return 0


def cmd_eval(args):
    m = model_mod.load_checkpoint(_resolve(args.model))
    ds = ds_mod.load_dataset(_resolve(args.data))
    idx = {"train": ds.train_idx, "test": ds.test_idx,
           "all": np.arange(len(ds.graphs))}[args.split]
    preds, det, loc = inference.evaluate(m, ds.graphs, idx, threshold=args.threshold)
    report = {
        "split": args.split,
        "detection": det.as_dict(),
        "localization": loc.as_dict(),
        "per_graph": [
            {"index": int(i), "g_pred": p.g_pred, "g_true": ds.graphs[int(i)].graph_label,
             "n_pred": p.n_pred.tolist()}
            for i, p in zip(idx, preds)
        ],
    }
    with open(_resolve(args.report), "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"wrote {args.report}: detection acc {det.accuracy:.4f}, "
          f"localization acc {loc.accuracy:.4f}")
    return 0


def cmd_infer(args):
    m = model_mod.load_checkpoint(_resolve(args.model))
    topo = topo_mod.Topology.from_json(open(_resolve(args.topo)).read())
    trace = sim_mod.load_trace(_resolve(args.trace))
    if trace.topo_digest != topo.digest():
        raise IOFormatError("trace topology digest does not match --topo")
    windows = ds_mod.window_trace(trace, m.cfg.series_len)
    graph = ds_mod.build_graph(windows, topo,
                               np.zeros(topo.num_nodes, dtype=np.uint8))
    pred = inference.detect_and_localize(m, graph, threshold=args.threshold)
    doc = {"g_pred": pred.g_pred, "n_pred": pred.n_pred.tolist(),
           "n_scores": [float(s) for s in pred.n_scores]}
    if args.out:
        with open(_resolve(args.out), "w") as fh:
            json.dump(doc, fh, indent=2)
    else:
        json.dump(doc, sys.stdout, indent=2)
        print()
    return 0


# -- experiment pipelines -----------------------------------------------------

def run_pipeline(topo_kind="mesh2d", n=8, profiles=None, mappings=8, n_mips=3,
                 pir=0.05, duration=2500, l=400, max_epochs=30, seed=0,
                 workers=1, batch_size=64):
    """dataset -> train -> eval on the held-out split; returns a result dict."""
    topo = (topo_mod.build_mesh_2d(n) if topo_kind == topo_mod.MESH2D
            else topo_mod.build_mesh_3d(n))
    profiles = profiles or list(sim_mod.PROFILE_NAMES)
    base = sim_mod.SimConfig(topo, duration, sim_mod.benign_profile(profiles[0], topo),
                             None, 4, seed)
    ds = ds_mod.generate_dataset(profiles, mappings, base, l=l, seed=seed,
                                 n_mips=n_mips, pir=pir, workers=workers)
    m = model_mod.build_model(model_mod.ModelConfig(series_len=l), seed=seed)
    tc = model_mod.TrainConfig(max_epochs=max_epochs, seed=seed,
                               batch_size=batch_size)
    m, history = model_mod.train(m, ds, tc)
    _, det, loc = inference.evaluate(m, ds.graphs, ds.test_idx)
    return {"dataset": ds, "model": m, "history": history,
            "detection": det, "localization": loc}


def run_experiment(exp_doc: dict, out_dir: str, seed=0, workers=1) -> dict:
    """Dispatch one named experiment, writing CSV/JSON artifacts + manifest."""
    name = exp_doc.get("name")
    if name not in ("baseline2d", "mip_sweep", "pir_sweep", "mesh3d"):
        raise ConfigError(f"unknown experiment {name!r}")
    os.makedirs(out_dir, exist_ok=True)
    common = dict(
        duration=int(exp_doc.get("duration", 2500)),
        l=int(exp_doc.get("l", 400)),
        max_epochs=int(exp_doc.get("max_epochs", 30)),
        mappings=int(exp_doc.get("mappings_per_profile", 8)),
        profiles=exp_doc.get("profiles"),
        seed=seed, workers=workers,
    )
    started = time.time()
    results = {}
    if name == "baseline2d":
        res = run_pipeline(n_mips=int(exp_doc.get("n_mips", 3)),
                           pir=float(exp_doc.get("pir", 0.05)), **common)
        results = {"detection": res["detection"].as_dict(),
                   "localization": res["localization"].as_dict()}
        _write_json(os.path.join(out_dir, "baseline2d.json"), results)
    elif name == "mip_sweep":
        grid = exp_doc.get("n_mips_grid", [1, 2, 3, 4, 5])
        if not grid:
            raise ConfigError("n_mips_grid must be non-empty")
        rows = []
        for nm in grid:
            res = run_pipeline(n_mips=int(nm), pir=float(exp_doc.get("pir", 0.05)),
                               **common)
            rows.append({"n_mips": nm,
                         "detection_acc": res["detection"].accuracy,
                         "localization_acc": res["localization"].accuracy,
                         "localization_f1": res["localization"].f1})
        _write_csv(os.path.join(out_dir, "mip_sweep.csv"), rows)
        results = {"rows": rows}
    elif name == "pir_sweep":
        grid = exp_doc.get("pir_grid", [0.3, 0.4, 0.5, 0.6, 0.7])
        if not grid:
            raise ConfigError("pir_grid must be non-empty")
        rows = []
        for pir in grid:
            res = run_pipeline(n_mips=int(exp_doc.get("n_mips", 3)), pir=float(pir),
                               **common)
            rows.append({"pir": pir,
                         "detection_acc": res["detection"].accuracy,
                         "localization_acc": res["localization"].accuracy,
                         "localization_f1": res["localization"].f1})
        _write_csv(os.path.join(out_dir, "pir_sweep.csv"), rows)
        results = {"rows": rows}
    else:  # mesh3d
        res = run_pipeline(topo_kind=topo_mod.MESH3D, n=int(exp_doc.get("n", 4)),
                           n_mips=int(exp_doc.get("n_mips", 3)),
                           pir=float(exp_doc.get("pir", 0.05)), **common)
        results = {"detection": res["detection"].as_dict(),
                   "localization": res["localization"].as_dict()}
        _write_json(os.path.join(out_dir, "mesh3d.json"), results)

    manifest = {
        "experiment": name,
        "config_digest": hashlib.sha256(
            json.dumps(exp_doc, sort_keys=True).encode()).hexdigest()[:16],
        "seed": seed,
        "version": __version__,
        "elapsed_s": round(time.time() - started, 2),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return results


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_experiment(args):
    doc = _load_json(_resolve(args.config))
    run_experiment(doc, _resolve(args.out_dir), seed=args.seed, workers=args.threads)
    print(f"experiment {doc.get('name')} complete; artifacts in {args.out_dir}")
    return 0


# -- self test ----------------------------------------------------------------

def self_test(f64=True, verbose=True) -> bool:
    """Quick oracle suite: gradients, GraphConv identity, Alg. 1, simulator."""
    checks = []

    errs = nncore_gradient_suite(trials=10)
    worst = max(errs.values())
    checks.append((f"gradient finite-difference (max rel err {worst:.2e})",
                   worst < 1e-4))

    gen = np.random.default_rng(7)
    ok = True
    for _ in range(20):
        n = int(gen.integers(2, 7))
        a = np.triu((gen.random((n, n)) < 0.5).astype(np.float64), 1)
        a = a + a.T
        x = gen.standard_normal((n, 3))
        w1 = gen.standard_normal((3, 4))
        w2 = gen.standard_normal((3, 4))
        b = gen.standard_normal(4)
        got = nncore.graph_conv(x, a, w1, w2, b)
        want = x @ w1 + a @ x @ w2 + b
        ok &= bool(np.max(np.abs(got - want)) <= 1e-12)
    checks.append(("GraphConv dense-oracle equality", ok))

    ok = True
    for _ in range(10000):
        v = (gen.random(int(gen.integers(1, 80))) < 0.1).astype(np.uint8)
        p = inference.prediction_from_scores(v.astype(np.float64), 0.5)
        ok &= p.g_pred == int(v.any())
    checks.append(("detection equals OR over node predictions", ok))

    topo = topo_mod.build_mesh_2d(4)
    prof = sim_mod.benign_profile("random-mc", topo)
    cfg = sim_mod.SimConfig(topo, 400, prof, None, 4, 99)
    t1 = sim_mod.run_scenario(cfg, check_conservation=True)
    t2 = sim_mod.run_scenario(cfg)
    same = all(np.array_equal(a_, b_) for a_, b_ in zip(t1.iifd, t2.iifd)) and \
        all(np.array_equal(a_, b_) for a_, b_ in zip(t1.oifd, t2.oifd))
    checks.append(("simulator determinism", same))
    rep = sim_mod.flit_conservation_report(t1)
    checks.append(("flit conservation", rep["balanced"]))

    all_ok = all(ok for _, ok in checks)
    if verbose:
        for label, ok in checks:
            print(f"[{'PASS' if ok else 'FAIL'}] {label}")
    return all_ok


def nncore_gradient_suite(trials=10, eps=1e-5, seed=0):
    """Max finite-difference relative error per layer kind, f64."""
    from .nncore import max_relative_error, numeric_gradient
    errs = {}

    def record(name, err):
        errs[name] = max(errs.get(name, 0.0), err)

    for t in range(trials):
        gen = np.random.default_rng(seed + t)
        b, c_in, c_out, L, k = 2, 2, 3, 9, 3
        x = gen.standard_normal((b, c_in, L))

        conv = nncore.Conv1d(c_in, c_out, k, stride=1 + t % 2, gen=gen,
                             dtype=np.float64)
        dy = gen.standard_normal(conv.forward(x).shape)
        conv.forward(x)
        dx = conv.backward(dy)
        record("conv1d.x", max_relative_error(
            dx, numeric_gradient(lambda: float((conv.forward(x) * dy).sum()), x, eps)))
        record("conv1d.w", max_relative_error(
            conv.grads["w"],
            numeric_gradient(lambda: float((conv.forward(x) * dy).sum()),
                             conv.params["w"], eps)))

        pool = nncore.AvgPool1d(3, 2)
        dyp = gen.standard_normal(pool.forward(x).shape)
        pool.forward(x)
        record("avg_pool1d.x", max_relative_error(
            pool.backward(dyp),
            numeric_gradient(lambda: float((pool.forward(x) * dyp).sum()), x, eps)))

        n = 4
        a = np.triu((gen.random((n, n)) < 0.5).astype(np.float64), 1)
        a = a + a.T
        xg = gen.standard_normal((2, n, 3))
        gc = nncore.GraphConv(3, 5, gen=gen, dtype=np.float64)
        dyg = gen.standard_normal(gc.forward(xg, a=a).shape)
        gc.forward(xg, a=a)
        dxg = gc.backward(dyg)
        record("graph_conv.x", max_relative_error(
            dxg, numeric_gradient(
                lambda: float((gc.forward(xg, a=a) * dyg).sum()), xg, eps)))
        for pname in ("w1", "w2", "b"):
            record(f"graph_conv.{pname}", max_relative_error(
                gc.grads[pname], numeric_gradient(
                    lambda: float((gc.forward(xg, a=a) * dyg).sum()),
                    gc.params[pname], eps)))

        lin = nncore.Linear(4, 3, gen=gen, dtype=np.float64)
        xl = gen.standard_normal((5, 4))
        dyl = gen.standard_normal(lin.forward(xl).shape)
        lin.forward(xl)
        record("linear.x", max_relative_error(
            lin.backward(dyl),
            numeric_gradient(lambda: float((lin.forward(xl) * dyl).sum()), xl, eps)))
        record("linear.w", max_relative_error(
            lin.grads["w"], numeric_gradient(
                lambda: float((lin.forward(xl) * dyl).sum()), lin.params["w"], eps)))

        sig = nncore.Sigmoid()
        dys = gen.standard_normal(xl.shape)
        sig.forward(xl)
        record("sigmoid.x", max_relative_error(
            sig.backward(dys),
            numeric_gradient(lambda: float((sig.forward(xl) * dys).sum()), xl, eps)))

        p = gen.uniform(0.05, 0.95, size=(6,))
        y = (gen.random(6) < 0.5).astype(np.float64)
        _, dp = weighted_bce_f64(p, y)
        record("weighted_bce.p", max_relative_error(
            dp, numeric_gradient(lambda: weighted_bce_f64(p, y)[0], p, eps)))
    return errs


def weighted_bce_f64(p, y):
    return nncore.weighted_bce(p, y, (0.7, 1.9))


def cmd_self_test(args):
    return 0 if self_test(f64=True) else EXIT_VALIDATION


# -- argument parsing ---------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="nocguard",
                                 description="NoC DDoS detection workbench")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--f64", action="store_true",
                    help="use float64 tensors where applicable")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("topo", help="emit a topology JSON document")
    p.add_argument("--kind", choices=[topo_mod.MESH2D, topo_mod.MESH3D],
                   required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_topo)

    p = sub.add_parser("simulate", help="run one scenario, write an NGTR trace")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-dataset", help="generate an NGDS dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train a model on an NGDS dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run detection/localization on one trace")
    p.add_argument("--model", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--topo", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("experiment", help="run a named experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("self-test", help="run the built-in oracle checks")
    p.set_defaults(func=cmd_self_test)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IOFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NocGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
