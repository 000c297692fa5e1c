"""``contactdiff`` command line: data generation, training, inference, evaluation, baseline, report.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .classifier import ClassifierArch, ContactClassifier
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .datagen import (
    STATE_NAMES,
    Dataset,
    DatasetError,
    build_dataset,
    read_dataset,
    scenario_rng,
    simulate_scenario,
    write_dataset,
    write_manifest,
)
from .diffusion import Denoiser, DenoiserArch, DiffusionSchedule
from .metrics import c_rmse, evaluate, m_rmse_batch, surface_distance_batch, write_csv, write_metrics_csv, write_table1_csv
from .pf import run_pf
from .pipeline import (
    classify_all,
    run_dataset_sequential,
    run_history_protocol,
    sample_null,
    time_inference,
    train_classifier,
    train_denoiser,
)
from .robot import RobotConfigError, resolve_robot

log = logging.getLogger("contactdiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

HISTORY_COLUMNS = ("variant", "n", "m_rmse_cm", "c_rmse_1_cm", "c_rmse_2_cm")
SDF_COLUMNS = ("variant", "n", "surface_dist_cm", "m_rmse_cm")
PF_COLUMNS = ("trial", "scenario", "error_cm", "within_2cm", "reinits")


# ---------------------------------------------------------------------------
# helpers


def _schedule(cfg: RunConfig) -> DiffusionSchedule:
    s = cfg.schedule
    return DiffusionSchedule.linear(s.K, s.beta_start, s.beta_end, s.n_ddim)


def _denoiser_arch(cfg: RunConfig, robot, use_sdf: bool) -> DenoiserArch:
    m = cfg.model
    return DenoiserArch(
        n_q=robot.n_q,
        T_w=cfg.data.T_w,
        n_p=cfg.data.n_p,
        K=cfg.schedule.K,
        width=m.width,
        width_mid=m.width_mid,
        global_width=m.global_width,
        hist_width=m.hist_width,
        sdf_width=m.sdf_width,
        n_freq=m.n_freq,
        wrench_scale=m.wrench_scale,
        use_sdf=use_sdf,
        x0_clip=m.x0_clip,
    )


def _denoiser_path(out: Path, variant: str) -> Path:
    return out / ("denoiser_nosdf.ckpt" if variant == "nosdf" else "denoiser.ckpt")


def _dataset_path(out: Path) -> Path:
    return out / "dataset.bin"


def _load_dataset(out: Path) -> Dataset:
    path = _dataset_path(out)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run gen-data first")
    return read_dataset(path)


def _split(cfg: RunConfig, ds: Dataset):
    return ds.split(cfg.data.train_fraction, cfg.seed)


def _eval_subset(cfg: RunConfig, ev: Dataset) -> Dataset:
    n = cfg.eval.max_windows
    if n and len(ev) > n:
        return ev.subset(np.arange(n))
    return ev


def _load_models(out: Path, robot, variant: str):
    path = _denoiser_path(out, variant)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run train first")
    model, _, _ = Denoiser.load(path, robot)
    clf = None
    if (out / "classifier.ckpt").exists():
        clf, _, _ = ContactClassifier.load(out / "classifier.ckpt", robot)
    return model, clf


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _record_run(out: Path, command: str, cfg: RunConfig, outputs: list[Path]) -> None:
    """Write the resolved config next to the outputs and update the manifest."""
    cfg_path = out / f"{command}.config.yaml"
    cfg.dump(cfg_path)
    man_path = out / "manifest.json"
    manifest = json.loads(man_path.read_text()) if man_path.exists() else {"runs": {}}
    manifest["runs"][command] = {
        "config": cfg_path.name,
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
    }
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_loss_log(path: Path, losses: list[float], start: int, append: bool) -> None:
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([start + i + 1, repr(float(loss))])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    robot = resolve_robot(cfg.robot)
    ds = build_dataset(robot, cfg.data)
    write_dataset(ds, _dataset_path(out))
    train, ev = _split(cfg, ds)
    write_manifest(out / "dataset.manifest.yaml", cfg.data, ds, {"train_windows": len(train), "eval_windows": len(ev)})
    counts = ds.state_counts()
    print(f"windows: {len(ds)} from {cfg.data.n_scenarios} scenarios")
    for name in STATE_NAMES:
        print(f"  {name}: {counts[name]}")
    _record_run(out, "gen-data", cfg, [_dataset_path(out), out / "dataset.manifest.yaml"])
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    robot = resolve_robot(cfg.robot)
    train, _ = _split(cfg, _load_dataset(out))
    schedule = _schedule(cfg)
    variant = args.variant or "his"
    path = _denoiser_path(out, variant)
    loss_path = out / ("loss_denoiser_nosdf.csv" if variant == "nosdf" else "loss_denoiser.csv")
    if path.exists():
        model, adam, _ = Denoiser.load(path, robot)
        log.info("resuming denoiser from step %d", adam.step)
    else:
        model = Denoiser.create(robot, _denoiser_arch(cfg, robot, variant != "nosdf"), seed=cfg.seed)
        adam = nn.AdamState()
    start = adam.step
    stop = min(args.stop_at, cfg.train.steps) if args.stop_at else cfg.train.steps
    adam, losses = train_denoiser(model, train, schedule, cfg.train, adam, stop_step=stop)
    model.save(path, adam)
    _write_loss_log(loss_path, losses, start, append=start > 0)
    print(f"denoiser ({variant}): steps {start}..{adam.step}, final loss {losses[-1] if losses else float('nan'):.4f}")
    outputs = [path, loss_path]
    if variant != "nosdf" and adam.step >= cfg.train.steps:
        cpath = out / "classifier.ckpt"
        cl_path = out / "loss_classifier.csv"
        if cpath.exists():
            clf, cadam, _ = ContactClassifier.load(cpath, robot)
        else:
            arch = ClassifierArch(robot.n_q, cfg.data.T_w, cfg.model.classifier_width, cfg.model.classifier_depth,
                                  cfg.model.wrench_scale)
            clf, cadam = ContactClassifier.create(robot, arch, seed=cfg.seed), nn.AdamState()
        cstart = cadam.step
        cadam, closses = train_classifier(clf, train, cfg.train, cadam)
        clf.save(cpath, cadam)
        _write_loss_log(cl_path, closses, cstart, append=cstart > 0)
        if closses:
            print(f"classifier: steps {cstart}..{cadam.step}, final loss {closses[-1]:.4f}")
        outputs += [cpath, cl_path]
    _record_run(out, f"train-{variant}", cfg, outputs)
    return EXIT_OK


def cmd_infer(cfg: RunConfig, out: Path, args) -> int:
    robot = resolve_robot(cfg.robot)
    variant = args.variant or "his"
    model, clf = _load_models(out, robot, variant)
    _, ev = _split(cfg, _load_dataset(out))
    ev = _eval_subset(cfg, ev)
    schedule = _schedule(cfg)
    if variant == "null":
        samples = sample_null(model, ev.obs(), schedule, cfg.seed, cfg.eval.batch_size)
        single = classify_all(clf, ev.obs()).argmax(axis=1) == 0 if clf else np.zeros(len(ev), bool)
    else:
        samples, single = run_dataset_sequential(model, clf, ev, schedule, cfg.seed, cfg.eval.batch_size)
    dump = out / f"infer_{variant}.npz"
    np.savez_compressed(dump, samples=samples.astype(np.float32), single=single, scenario=ev.scenario_ids,
                        t=ev.records["t"], label=ev.labels)
    timing = time_inference(model, clf, ev.obs(), schedule, cfg.seed, cfg.eval.timing_windows)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    print(f"inferred {len(ev)} windows, {model.arch.n_p} points each")
    print(f"inference time per window: mean {timing['mean_ms']:.2f} ms, median {timing['median_ms']:.2f} ms")
    _record_run(out, f"infer-{variant}", cfg, [dump, out / "timing.json"])
    return EXIT_OK


def _scatter_svgs(out: Path, ev: Dataset, samples: np.ndarray, n: int, tag: str) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "contactdiff"
    paths = []
    picks = []
    for state in range(3):
        idx = np.flatnonzero(ev.labels == state)
        picks += list(idx[:n])
    for i in picks:
        fig, ax = plt.subplots(figsize=(4, 4))
        pts = samples[i]
        truth = ev.truths(i)
        links = ev.records["poses"][i][:, :3]
        chain = np.vstack([[0.0, 0.0, 0.0], links])
        ax.plot(chain[:, 0], chain[:, 1], "-", color="0.6", lw=3)
        ax.scatter(pts[:, 0], pts[:, 1], s=6, c="tab:blue", label="samples")
        ax.scatter(truth[:, 0], truth[:, 1], s=60, marker="x", c="tab:red", label="contacts")
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(f"{STATE_NAMES[ev.labels[i]]} scenario {ev.scenario_ids[i]} t={ev.records['t'][i]} ms")
        ax.legend(loc="best", fontsize=7)
        p = out / f"scatter_{tag}_{len(paths):02d}.svg"
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    robot = resolve_robot(cfg.robot)
    model, clf = _load_models(out, robot, "his")
    _, ev_full = _split(cfg, _load_dataset(out))
    ev = _eval_subset(cfg, ev_full)
    schedule = _schedule(cfg)
    samples = sample_null(model, ev.obs(), schedule, cfg.seed, cfg.eval.batch_size)
    single = classify_all(clf, ev.obs()).argmax(axis=1) == 0 if clf else np.zeros(len(ev), bool)
    qp_ev, qp_idx = ev, np.arange(len(ev))
    if cfg.eval.with_qp and cfg.eval.qp_windows:
        qp_idx = np.concatenate([np.flatnonzero(ev.labels == s)[: cfg.eval.qp_windows] for s in range(3)])
        qp_ev = ev.subset(qp_idx)
    reports = evaluate(ev, samples, single, robot, cfg.seed, with_qp=False)
    if cfg.eval.with_qp:
        qp_reports = evaluate(qp_ev, samples[qp_idx], single[qp_idx], robot, cfg.seed, with_qp=True)
        for r, q in zip(reports, qp_reports):
            r.qp_error, r.jts_err, r.base_f_err, r.base_t_err = q.qp_error, q.jts_err, q.base_f_err, q.base_t_err
            r.qp_error_centers = q.qp_error_centers
    outputs = [out / "metrics.csv", out / "table1.csv"]
    write_metrics_csv(outputs[0], reports)
    write_table1_csv(outputs[1], reports)
    for r in reports:
        print(f"{r.state:16s} n={r.n:6d} M-RMSE {r.m_rmse:7.3f} cm  failure {100 * r.failure_rate:6.2f} %  "
              f"surface {r.mean_surface_dist:6.3f} cm  QP {r.qp_error:.3f}")

    # history ablation on regenerated eval scenarios with fixed window ends
    if clf is not None and cfg.eval.history_scenarios:
        ids = np.unique(ev_full.scenario_ids)[: cfg.eval.history_scenarios]
        rows = []
        for variant, use in (("his", True), ("null", False)):
            res = run_history_protocol(model, clf, robot, cfg.data, ids, schedule, cfg.seed, use, batch_size=cfg.eval.batch_size)
            rows.append(history_row(variant, res, cfg.seed))
        write_csv(out / "ablation_history.csv", rows, HISTORY_COLUMNS)
        outputs.append(out / "ablation_history.csv")
        for r in rows:
            print(f"history ablation {r['variant']:5s} n={r['n']} M-RMSE {r['m_rmse_cm']:.3f} cm")

    nosdf = _denoiser_path(out, "nosdf")
    if nosdf.exists():
        m2, _, _ = Denoiser.load(nosdf, robot)
        s2 = sample_null(m2, ev.obs(), schedule, cfg.seed, cfg.eval.batch_size)
        rows = [sdf_row("sdf", ev, samples, robot), sdf_row("nosdf", ev, s2, robot)]
        write_csv(out / "ablation_sdf.csv", rows, SDF_COLUMNS)
        outputs.append(out / "ablation_sdf.csv")
        for r in rows:
            print(f"SDF ablation {r['variant']:5s} surface distance {r['surface_dist_cm']:.3f} cm")

    outputs += _scatter_svgs(out, ev, samples, cfg.eval.plots, "eval")
    _record_run(out, "eval", cfg, outputs)
    return EXIT_OK


def history_row(variant: str, res, seed: int) -> dict:
    """Dual-contact rows of a sequential run aggregated into one ablation row."""
    dual = res.n_c >= 2
    S, W = dual.shape
    samples = res.samples[dual]
    truth = res.truth[dual]
    n_c = res.n_c[dual]
    mr = m_rmse_batch(samples, truth, n_c)
    cr = np.array([c_rmse(samples[i], truth[i, :2], seed) for i in range(len(samples))])
    return {"variant": variant, "n": int(dual.sum()), "m_rmse_cm": float(mr.mean()),
            "c_rmse_1_cm": float(cr[:, 0].mean()), "c_rmse_2_cm": float(cr[:, 1].mean())}


def sdf_row(variant: str, ev: Dataset, samples: np.ndarray, robot) -> dict:
    sd = surface_distance_batch(samples, robot, ev.records["poses"])
    mr = m_rmse_batch(samples, ev.records["r"], ev.records["n_c"])
    return {"variant": variant, "n": len(ev), "surface_dist_cm": float(sd.mean()), "m_rmse_cm": float(mr.mean())}


def pf_trials(cfg: RunConfig, robot, scenario_ids) -> list[dict]:
    """Particle filter on single-contact scenarios, one trial per scenario id."""
    data = cfg.data.from_dict({**cfg.data.to_dict(), "single_only": True})
    p = cfg.pf
    rows = []
    for trial, sid in enumerate(scenario_ids):
        sc = simulate_scenario(robot, scenario_rng(data.seed, int(sid)), data, int(sid), data.seed)
        ts = p.start_ms + p.every_ms * np.arange(p.steps)
        meas = sc.wrench_obs[np.minimum(ts, len(sc.wrench_obs) - 1)]
        est, ps = run_pf(robot, sc.q, meas, np.random.default_rng([cfg.seed, 9, trial]), p.pf)
        err = float(np.linalg.norm(est - sc.contacts[0].r) * 100.0)
        rows.append({"trial": trial, "scenario": int(sid), "error_cm": err, "within_2cm": int(err <= 2.0),
                     "reinits": ps.reinits})
    return rows


def cmd_pf(cfg: RunConfig, out: Path, args) -> int:
    robot = resolve_robot(cfg.robot)
    # trial scenarios are drawn from ids beyond the generated dataset
    ids = cfg.data.n_scenarios + np.arange(cfg.pf.trials)
    rows = pf_trials(cfg, robot, ids)
    write_csv(out / "pf_trials.csv", rows, PF_COLUMNS)
    err = np.array([r["error_cm"] for r in rows])
    summary = {"trials": len(rows), "mean_error_cm": float(err.mean()), "median_error_cm": float(np.median(err)),
               "within_2cm_pct": float(100.0 * np.mean(err <= 2.0))}
    write_csv(out / "pf_summary.csv", [summary], tuple(summary))
    print(f"PF: {summary['within_2cm_pct']:.1f}% of {len(rows)} trials within 2 cm, mean error {summary['mean_error_cm']:.2f} cm")
    _record_run(out, "pf", cfg, [out / "pf_trials.csv", out / "pf_summary.csv"])
    return EXIT_OK


def cmd_report(cfg: RunConfig, out: Path, args) -> int:
    lines = ["# Run report", ""]
    for name in ("table1.csv", "metrics.csv", "ablation_history.csv", "ablation_sdf.csv", "pf_summary.csv"):
        p = out / name
        if not p.exists():
            continue
        rows = list(csv.reader(p.read_text().splitlines()))
        lines += [f"## {name}", "", "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        lines.append("")
    if (out / "timing.json").exists():
        t = json.loads((out / "timing.json").read_text())
        lines += ["## inference time", "", f"mean {t['mean_ms']:.2f} ms per window over {t['windows']} windows", ""]
    (out / "report.md").write_text("\n".join(lines))
    print("\n".join(lines))
    _record_run(out, "report", cfg, [out / "report.md"])
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "pf": cmd_pf,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="contactdiff", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="YAML run configuration")
    ap.add_argument("--seed", type=int, help="overrides every seed in the config")
    ap.add_argument("--preset", help="robot preset name (planar3, spatial7) or robot YAML path")
    ap.add_argument("--out", type=Path, default=Path("runs/default"))
    ap.add_argument("--variant", choices=["his", "null", "nosdf"])
    ap.add_argument("--stop-at", type=int, default=0, help="train: stop (and checkpoint) at this step")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg.seed = cfg.data.seed = cfg.train.seed = args.seed
    if args.preset:
        cfg.robot = args.preset
    resolve_robot(cfg.robot)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    nn.set_threads()
    try:
        cfg = resolve_config(args)
    except (ConfigError, RobotConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, args.out, args)
    except (ConfigError, RobotConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, nn.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
