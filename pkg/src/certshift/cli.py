"""Command-line pipeline: data generation, training, attack evaluation,
certification, curves, Frechet distances, and the end-to-end experiment.

Every command is a thin deterministic wrapper over one module; artifacts land
under the chosen output directory and rerunning a command with the same
arguments reproduces them byte for byte. Budgets like ``--eps 2/255`` are
parsed as exact fractions.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attack as atk
from . import certify as ct
from . import datagen as dg
from . import deform
from . import diffnet as dn
from . import metrics as mt
from . import train as tr
from .parallel import thread_count

CONFIG_VERSION = 1


class CliError(RuntimeError):
    """Failure with a one-line diagnostic; maps to a nonzero exit code."""


def parse_eps(text: str) -> float:
    """Parse '2/255' or '0.05' exactly."""
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise CliError(f"could not parse epsilon {text!r}") from None


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what}: {path}")
    return path


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    bench = dg.generate_benchmark(
        seed=args.seed,
        per_domain=args.per_domain,
        image_size=args.image_size,
        class_count=args.classes,
        target_domain=args.target,
        val_fraction=args.val_fraction,
    )
    dg.save_benchmark(bench, args.out)
    print(f"benchmark written to {args.out} (domains: {', '.join(bench.domain_names)})")
    return 0


# ---------------------------------------------------------------------------
# train


def _attack_config_from(args_or_map, prefix: str = "") -> atk.AttackConfig:
    get = (
        (lambda k, d: getattr(args_or_map, (prefix + k).replace("-", "_"), d))
        if not isinstance(args_or_map, dict)
        else (lambda k, d: args_or_map.get(prefix + k, d))
    )
    eps = get("eps", "2/255")
    return atk.AttackConfig(
        norm=get("norm", "linf"),
        eps=parse_eps(eps) if isinstance(eps, str) else float(eps),
        steps=int(get("steps", 20)),
        restarts=int(get("restarts", 2)),
    )


def _parse_augmentation(text: str | None) -> tr.AugmentationConfig | None:
    if not text:
        return None
    kind, _, sigma = text.partition(":")
    if not sigma:
        raise CliError(f"augmentation must look like kind:sigma, got {text!r}")
    return tr.AugmentationConfig(kind=kind, sigma=float(sigma))


def _train_one(bench, arch, cfg: tr.TrainConfig, out_dir: Path) -> tr.TrainResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    result = tr.train(bench, arch, cfg)
    for rec, net in zip(result.log, result.checkpoints):
        dn.save_checkpoint(
            net,
            out_dir / f"epoch_{rec.epoch:03d}.ckpt",
            seed=cfg.seed,
            epoch=rec.epoch,
            metrics={"train_loss": rec.train_loss, "val_acc": rec.val_acc},
        )
    best = tr.select_model(result.log, result.checkpoints)
    best_epoch = max(
        range(len(result.log)), key=lambda i: (result.log[i].val_acc, -i)
    )
    dn.save_checkpoint(
        best,
        out_dir / "best.ckpt",
        seed=cfg.seed,
        epoch=best_epoch,
        metrics={"val_acc": result.log[best_epoch].val_acc},
    )
    tr.write_log_csv(out_dir / "log.csv", result.log)
    return result


def cmd_train(args) -> int:
    bench = dg.load_benchmark(_require(Path(args.data), "benchmark directory"))
    train_attack = atk.AttackConfig(
        norm=args.norm, eps=parse_eps(args.eps), steps=args.steps, restarts=1
    )
    cfg = tr.TrainConfig(
        method=args.method,
        lam=args.lam,
        beta=args.beta,
        attack=train_attack,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        augmentation=_parse_augmentation(args.aug),
    )
    result = _train_one(bench, args.arch, cfg, Path(args.out))
    final = result.log[-1]
    print(
        f"trained {args.method} for {cfg.epochs} epochs: final loss {final.train_loss:.4f}, "
        f"val acc {final.val_acc:.4f} -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval-attack


def _load_ckpt(path: Path) -> dn.Network:
    return dn.load_checkpoint(_require(path, "checkpoint"))[0]


def cmd_eval_attack(args) -> int:
    bench = dg.load_benchmark(_require(Path(args.data), "benchmark directory"))
    runs: dict[str, list[dn.Network]] = {}
    for item in args.ckpt:
        label, _, path = item.partition("=")
        if not path:
            raise CliError(f"--ckpt expects label=path, got {item!r}")
        runs.setdefault(label, []).append(_load_ckpt(Path(path)))
    cfg = _attack_config_from(args)
    datasets = {
        "source_val": dg.source_arrays(bench, "val"),
        "target": (bench.target.images, bench.target.labels),
    }
    rows = mt.accuracy_table(runs, datasets, cfg, seed=args.seed, threads=thread_count(args.threads))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mt.write_table_csv(out / "table.csv", rows)
    mt.plot_table_svg(out / "table.svg", rows, title=f"eps={args.eps} {args.norm}")
    for r in rows:
        print(f"{r.method:10s} {r.split:10s} {r.metric:10s} {r.mean:.4f} +- {r.std:.4f}")
    return 0


# ---------------------------------------------------------------------------
# certify


CERTIFY_MODES = ("pixel",) + deform.KINDS


def _certify_split(bench, split: str, count: int):
    if split == "target":
        images, labels = bench.target.images, bench.target.labels
    elif split == "source":
        images, labels = dg.source_arrays(bench, "val")
    else:
        raise CliError(f"split must be source or target, got {split!r}")
    return images[:count], labels[:count]


def _write_outcomes_csv(path, outcomes, labels) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "verdict", "predicted", "pA_lower", "radius"])
        for i, (o, y) in enumerate(zip(outcomes, labels)):
            w.writerow([i, int(y), o.verdict, o.predicted, repr(o.p_lower), repr(o.radius)])


def _read_outcomes_csv(path):
    import csv

    outcomes, labels = [], []
    with open(path, newline="") as fh:
        for row in list(csv.reader(fh))[1:]:
            labels.append(int(row[1]))
            outcomes.append(
                ct.CertOutcome(row[2], int(row[3]), float(row[4]), float(row[5]))
            )
    return outcomes, labels


def cmd_certify(args) -> int:
    bench = dg.load_benchmark(_require(Path(args.data), "benchmark directory"))
    net = _load_ckpt(Path(args.ckpt))
    if args.mode not in CERTIFY_MODES:
        raise CliError(f"mode must be one of {CERTIFY_MODES}")
    cfg = ct.SmoothingConfig(
        distribution=args.distribution, sigma=args.sigma, n0=args.n0, n=args.n, alpha=args.alpha
    )
    images, labels = _certify_split(bench, args.split, args.count)
    outcomes = ct.certify_dataset(
        net, images, labels, cfg, mode=args.mode, seed=args.seed,
        threads=thread_count(args.threads),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_outcomes_csv(out, outcomes, labels)
    certified = sum(1 for o in outcomes if o.certified)
    print(
        f"{args.mode} sigma={args.sigma} {args.split}: {certified}/{len(outcomes)} certified, "
        f"ACR {mt.acr(outcomes, labels):.4f} -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# curves


def cmd_curves(args) -> int:
    cert_dir = _require(Path(args.certify_dir), "certification directory")
    files = sorted(cert_dir.glob("*_sigma*_*.csv"))
    if not files:
        raise CliError(f"no certification CSVs under {cert_dir}")
    groups: dict[tuple[str, str], list[tuple[float, list, list]]] = {}
    for f in files:
        stem = f.stem
        kind, rest = stem.split("_sigma", 1)
        sigma_text, split = rest.rsplit("_", 1)
        outcomes, labels = _read_outcomes_csv(f)
        groups.setdefault((kind, split), []).append((float(sigma_text), outcomes, labels))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_curves: list[mt.CertCurve] = []
    acr_rows = []
    by_kind: dict[str, list[mt.CertCurve]] = {}
    for (kind, split), entries in sorted(groups.items()):
        pooled = [o for _, outcomes, _ in entries for o in outcomes]
        grid = mt.default_radius_grid(pooled, points=args.points)
        per_sigma = []
        for sigma, outcomes, labels in sorted(entries, key=lambda e: e[0]):
            curve = mt.certified_curve(outcomes, labels, grid, kind=kind, sigma=sigma, split=split)
            per_sigma.append(curve)
            acr_rows.append((kind, sigma, split, mt.acr(outcomes, labels)))
        env = mt.envelope(per_sigma)
        acr_rows.append((kind, "envelope", split, max(r[3] for r in acr_rows
                                                      if r[0] == kind and r[2] == split)))
        all_curves.extend(per_sigma)
        all_curves.append(env)
        by_kind.setdefault(kind, []).extend(per_sigma + [env])

    mt.write_curves_csv(out / "curves.csv", all_curves)
    import csv

    with open(out / "acr.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "sigma", "split", "acr"])
        for kind, sigma, split, value in acr_rows:
            w.writerow([kind, sigma if isinstance(sigma, str) else repr(sigma), split, repr(value)])
    for kind, curves in by_kind.items():
        mt.plot_curves_svg(out / f"curves_{kind}.svg", curves, title=kind)
    print(f"curves for {sorted(by_kind)} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# fid


def _read_acr_csv(path) -> dict[tuple[str, str, str], float]:
    import csv

    table = {}
    with open(path, newline="") as fh:
        for row in list(csv.reader(fh))[1:]:
            table[(row[0], row[1], row[2])] = float(row[3])
    return table


def cmd_fid(args) -> int:
    bench = dg.load_benchmark(_require(Path(args.data), "benchmark directory"))
    net_ref = _load_ckpt(Path(args.ckpt_erm))
    net_rob = _load_ckpt(Path(args.ckpt_robust))
    source_images = np.concatenate([d.images for d in bench.sources])
    entries = []
    fid_val = mt.fid(
        mt.extract_features(net_ref, source_images),
        mt.extract_features(net_ref, bench.target.images),
    )
    rfid_val = mt.fid(
        mt.extract_features(net_rob, source_images),
        mt.extract_features(net_rob, bench.target.images),
    )
    delta_acr = float("nan")
    if args.acr_csv:
        table = _read_acr_csv(_require(Path(args.acr_csv), "ACR table"))
        kind = args.acr_kind
        src = table.get((kind, "envelope", "source"))
        tgt = table.get((kind, "envelope", "target"))
        if src is None or tgt is None:
            raise CliError(f"ACR table lacks envelope rows for kind {kind!r}")
        delta_acr = src - tgt
    entries.append(
        {
            "target_domain": bench.target.name,
            "fid": fid_val,
            "rfid": rfid_val,
            "delta_acr": delta_acr,
        }
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mt.write_fid_csv(out, entries)
    print(f"FID {fid_val:.3f}  R-FID {rfid_val:.3f}  deltaACR {delta_acr:.4f} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# experiment


DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "seed": 1,
    "seeds": 4,
    "arch": "cnn32",
    "benchmark": {
        "per_domain": 160,
        "image_size": 32,
        "class_count": 4,
        "target_domain": "textured",
        "val_fraction": 0.2,
    },
    "train": {
        "epochs": 32,
        "erm_epochs": 45,
        "batch_size": 32,
        "learning_rate": 0.05,
        "lam": 0.5,
        "beta": 3.0,
        "eps": "8/255",
        "steps": 5,
        "aug_epochs": 30,
    },
    "attack": {"norm": "linf", "eps": "8/255", "steps": 20, "restarts": 2},
    "smoothing": {
        "alpha": 0.001,
        "n0": 100,
        "n": 2000,
        "eval_count": 40,
        "modes": {"pixel": [0.25, 0.5], "rotation": [0.25, 0.5]},
    },
    "invariance": {"kinds": ["gaussian_noise", "rotation"], "eps_grid": [0.0, 0.25, 0.5]},
}


def load_experiment_config(path) -> dict:
    cfg = json.loads(Path(path).read_text())
    if cfg.get("version") != CONFIG_VERSION:
        raise CliError(
            f"unsupported config version {cfg.get('version')!r}, expected {CONFIG_VERSION}"
        )
    merged = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, value in cfg.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def _sigma_label(sigma: float) -> str:
    return f"{sigma:g}"


def run_experiment(config: dict, out_dir: Path, threads: int = 1) -> dict:
    """gen-data -> train -> eval-attack -> certify -> curves -> fid -> summary."""
    from .parallel import single_threaded_blas

    with single_threaded_blas():
        return _run_experiment(config, out_dir, threads)


def _run_experiment(config: dict, out_dir: Path, threads: int) -> dict:
    t_start = time.monotonic()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
    stage = "gen-data"
    try:
        bench_dir = out_dir / "benchmark"
        bench = dg.generate_benchmark(
            seed=config["seed"],
            per_domain=config["benchmark"]["per_domain"],
            image_size=config["benchmark"]["image_size"],
            class_count=config["benchmark"]["class_count"],
            target_domain=config["benchmark"]["target_domain"],
            val_fraction=config["benchmark"]["val_fraction"],
        )
        dg.save_benchmark(bench, bench_dir)

        stage = "train"
        tc = config["train"]
        train_eps = parse_eps(tc["eps"]) if isinstance(tc["eps"], str) else float(tc["eps"])
        train_attack = atk.AttackConfig(
            norm=config["attack"]["norm"], eps=train_eps, steps=tc["steps"], restarts=1
        )
        arch = config["arch"]

        # augmented-model plan: smoothing modes need sigma-matched training,
        # the invariance study needs one model per kind at its largest sigma
        aug_plan: set[tuple[str, float]] = set()
        for mode, grid in config["smoothing"]["modes"].items():
            kind = "gaussian_noise" if mode == "pixel" else mode
            aug_plan |= {(kind, float(v)) for v in grid}
        inv_default = max((float(v) for v in config["invariance"]["eps_grid"]), default=0.5) or 0.5
        for kind in config["invariance"]["kinds"]:
            if not any(k == kind for k, _ in aug_plan):
                aug_plan.add((kind, inv_default))

        jobs: list[tuple[str, tr.TrainConfig, Path]] = []
        for method in tr.METHODS:
            for s in range(config["seeds"]):
                cfg_m = tr.TrainConfig(
                    method=method,
                    lam=tc["lam"],
                    beta=tc["beta"],
                    attack=train_attack,
                    epochs=tc.get("erm_epochs", tc["epochs"]) if method == "erm" else tc["epochs"],
                    batch_size=tc["batch_size"],
                    learning_rate=tc["learning_rate"],
                    seed=config["seed"] * 1000 + s,
                )
                jobs.append((f"{method}_s{s}", cfg_m, out_dir / "ckpt" / f"{method}_s{s}"))
        for kind, sigma in sorted(aug_plan):
            cfg_a = tr.TrainConfig(
                method="erm",
                epochs=tc.get("aug_epochs", tc["epochs"]),
                batch_size=tc["batch_size"],
                learning_rate=tc["learning_rate"],
                seed=config["seed"] * 1000,
                augmentation=tr.AugmentationConfig(kind=kind, sigma=sigma),
            )
            jobs.append((f"aug_{kind}_{_sigma_label(sigma)}", cfg_a,
                         out_dir / "ckpt" / f"aug_{kind}_{_sigma_label(sigma)}"))

        # independent seeded runs; a worker pool only changes scheduling
        from concurrent.futures import ThreadPoolExecutor

        def run_job(job):
            name, cfg_j, path = job
            res = _train_one(bench, arch, cfg_j, path)
            return name, tr.select_model(res.log, res.checkpoints)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = dict(pool.map(run_job, jobs))
        else:
            results = dict(run_job(j) for j in jobs)

        selected = {
            method: [results[f"{method}_s{s}"] for s in range(config["seeds"])]
            for method in tr.METHODS
        }
        aug_models = {
            (kind, sigma): results[f"aug_{kind}_{_sigma_label(sigma)}"]
            for kind, sigma in aug_plan
        }

        stage = "eval-attack"
        eval_attack = _attack_config_from(config["attack"])
        datasets = {
            "source_val": dg.source_arrays(bench, "val"),
            "target": (bench.target.images, bench.target.labels),
        }
        table_rows = mt.accuracy_table(
            selected, datasets, eval_attack, seed=config["seed"], threads=threads
        )
        attack_dir = out_dir / "attack"
        attack_dir.mkdir(exist_ok=True)
        mt.write_table_csv(attack_dir / "table.csv", table_rows)
        mt.plot_table_svg(attack_dir / "table.svg", table_rows, title=f"eps={config['attack']['eps']}")

        stage = "certify"
        sm = config["smoothing"]
        cert_dir = out_dir / "certify"
        cert_dir.mkdir(exist_ok=True)
        count = sm["eval_count"]
        for mode, sigmas in sm["modes"].items():
            aug_kind = "gaussian_noise" if mode == "pixel" else mode
            for sigma in (float(v) for v in sigmas):
                net = aug_models[(aug_kind, sigma)]
                cfg_s = ct.SmoothingConfig(
                    distribution="gaussian", sigma=sigma, n0=sm["n0"], n=sm["n"], alpha=sm["alpha"]
                )
                for split in ("source", "target"):
                    images, labels = _certify_split(bench, split, count)
                    outcomes = ct.certify_dataset(
                        net, images, labels, cfg_s,
                        mode=mode, seed=config["seed"], threads=threads,
                    )
                    _write_outcomes_csv(
                        cert_dir / f"{mode}_sigma{_sigma_label(sigma)}_{split}.csv",
                        outcomes, labels,
                    )

        stage = "curves"
        curves_ns = argparse.Namespace(
            certify_dir=str(cert_dir), out=str(out_dir / "curves"), points=200
        )
        cmd_curves(curves_ns)

        stage = "fid"
        acr_table = _read_acr_csv(out_dir / "curves" / "acr.csv")
        fid_ns = argparse.Namespace(
            data=str(bench_dir),
            ckpt_erm=str(out_dir / "ckpt" / "erm_s0" / "best.ckpt"),
            ckpt_robust=str(out_dir / "ckpt" / "pgd_aug_s0" / "best.ckpt"),
            acr_csv=str(out_dir / "curves" / "acr.csv"),
            acr_kind="pixel" if "pixel" in sm["modes"] else sorted(sm["modes"])[0],
            out=str(out_dir / "fid" / "fid.csv"),
        )
        cmd_fid(fid_ns)

        stage = "invariance"
        inv = config["invariance"]
        base_net = selected["erm"][0]
        aug_for_kind = {}
        for kind in inv["kinds"]:
            candidates = [sig for (k, sig) in aug_models if k == kind]
            if not candidates:
                raise CliError(f"no augmented model trained for invariance kind {kind!r}")
            aug_for_kind[kind] = aug_models[(kind, max(candidates))]
        inv_rows = tr.invariance_table(
            bench, base_net, aug_for_kind, [float(v) for v in inv["eps_grid"]],
            seed=config["seed"],
        )
        inv_dir = out_dir / "invariance"
        inv_dir.mkdir(exist_ok=True)
        tr.write_invariance_csv(inv_dir / "table.csv", inv_rows)

        stage = "summary"
        summary = _summarize(config, table_rows, acr_table, inv_rows, time.monotonic() - t_start)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        return summary
    except CliError:
        raise
    except Exception as exc:  # preserve partial artifacts, name the stage
        raise CliError(f"stage {stage!r} failed: {exc}") from exc


def _table_value(rows, method, split, metric) -> float:
    for r in rows:
        if (r.method, r.split, r.metric) == (method, split, metric):
            return r.mean
    raise CliError(f"accuracy table lacks ({method}, {split}, {metric})")


def _summarize(config, table_rows, acr_table, inv_rows, elapsed) -> dict:
    baseline_rob = _table_value(table_rows, "erm", "target", "robust_acc")
    pgd_rob = _table_value(table_rows, "pgd_aug", "target", "robust_acc")
    trades_rob = _table_value(table_rows, "trades", "target", "robust_acc")
    baseline_clean = _table_value(table_rows, "erm", "target", "clean_acc")
    pgd_clean = _table_value(table_rows, "pgd_aug", "target", "clean_acc")
    trades_clean = _table_value(table_rows, "trades", "target", "clean_acc")

    pixel_src = acr_table.get(("pixel", "envelope", "source"), 0.0)
    pixel_tgt = acr_table.get(("pixel", "envelope", "target"), 0.0)
    deform_kinds = sorted({k for (k, s, _) in acr_table if k != "pixel" and s == "envelope"})
    deform_tgt = {k: acr_table[(k, "envelope", "target")] for k in deform_kinds}

    inv_checks = {}
    for kind in {r.kind for r in inv_rows}:
        eps_max = max(r.eps for r in inv_rows if r.kind == kind)
        with_acc = next(
            r.accuracy for r in inv_rows
            if r.kind == kind and r.eps == eps_max and r.augmented and r.split == "target"
        )
        without_acc = next(
            r.accuracy for r in inv_rows
            if r.kind == kind and r.eps == eps_max and not r.augmented and r.split == "target"
        )
        inv_checks[kind] = {
            "eps": eps_max,
            "target_with_aug": with_acc,
            "target_without_aug": without_acc,
            "augmentation_helps": bool(with_acc > without_acc),
        }

    return {
        "elapsed_seconds": elapsed,
        "q1_robust_training_does_not_improve_target_clean": {
            "holds": bool(pgd_clean <= baseline_clean and trades_clean <= baseline_clean),
            "baseline_target_clean": baseline_clean,
            "pgd_aug_target_clean": pgd_clean,
            "trades_target_clean": trades_clean,
        },
        "q2_robustness_generalizes": {
            "holds": bool(
                pgd_rob >= baseline_rob + 0.10 and trades_rob >= baseline_rob + 0.10
            ),
            "baseline_target_robust": baseline_rob,
            "pgd_aug_target_robust": pgd_rob,
            "trades_target_robust": trades_rob,
            "baseline_collapses": bool(baseline_rob < 0.05),
        },
        "q3_tradeoff_in_target": {
            "holds": bool(
                pgd_clean <= baseline_clean and trades_clean <= baseline_clean
                and pgd_rob > baseline_rob and trades_rob > baseline_rob
            ),
        },
        "q4_certified_robustness_generalizes": {
            "pixel_source_acr": pixel_src,
            "pixel_target_acr": pixel_tgt,
            "target_over_source": (pixel_tgt / pixel_src) if pixel_src > 0 else 0.0,
            "holds": bool(pixel_src > 0 and pixel_tgt >= 0.5 * pixel_src),
            "deformation_target_acr": deform_tgt,
        },
        "invariance_generalizes": inv_checks,
    }


def cmd_experiment(args) -> int:
    config = load_experiment_config(_require(Path(args.config), "experiment config"))
    out_dir = Path(args.out) if args.out else Path(config.get("output_dir", "experiment_out"))
    threads = thread_count(args.threads)
    summary = run_experiment(config, out_dir, threads=threads)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.dir)
    summary_path = _require(out_dir / "summary.json", "experiment summary")
    expected = [
        "attack/table.csv",
        "curves/curves.csv",
        "curves/acr.csv",
        "fid/fid.csv",
        "invariance/table.csv",
    ]
    missing = [p for p in expected if not (out_dir / p).exists()]
    if missing:
        raise CliError(f"experiment directory incomplete, missing: {', '.join(missing)}")
    print(summary_path.read_text())
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="certshift", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic multi-domain benchmark")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--per-domain", type=int, default=500)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--target", default="sketch")
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=tr.METHODS, default="erm")
    t.add_argument("--arch", default="cnn32")
    t.add_argument("--eps", default="2/255")
    t.add_argument("--norm", choices=atk.NORMS, default="linf")
    t.add_argument("--steps", type=int, default=5)
    t.add_argument("--lam", type=float, default=0.5)
    t.add_argument("--beta", type=float, default=3.0)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--aug", default=None, help="augmentation kind:sigma")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval-attack", help="clean and robust accuracy table")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", action="append", required=True, help="label=path, repeatable")
    e.add_argument("--eps", default="2/255")
    e.add_argument("--norm", choices=atk.NORMS, default="linf")
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--restarts", type=int, default=2)
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--threads", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval_attack)

    c = sub.add_parser("certify", help="randomized-smoothing certification")
    c.add_argument("--data", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--mode", choices=CERTIFY_MODES, default="pixel")
    c.add_argument("--distribution", choices=("gaussian", "uniform"), default="gaussian")
    c.add_argument("--sigma", type=float, default=0.25)
    c.add_argument("--n", type=int, default=10000)
    c.add_argument("--n0", type=int, default=100)
    c.add_argument("--alpha", type=float, default=0.001)
    c.add_argument("--split", choices=("source", "target"), default="target")
    c.add_argument("--count", type=int, default=100)
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--threads", type=int, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_certify)

    u = sub.add_parser("curves", help="certified-accuracy curves, envelopes, ACR")
    u.add_argument("--certify-dir", required=True)
    u.add_argument("--points", type=int, default=200)
    u.add_argument("--out", required=True)
    u.set_defaults(fn=cmd_curves)

    f = sub.add_parser("fid", help="FID/R-FID between sources and target")
    f.add_argument("--data", required=True)
    f.add_argument("--ckpt-erm", required=True)
    f.add_argument("--ckpt-robust", required=True)
    f.add_argument("--acr-csv", default=None)
    f.add_argument("--acr-kind", default="pixel")
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_fid)

    x = sub.add_parser("experiment", help="full pipeline from a JSON config")
    x.add_argument("--config", required=True)
    x.add_argument("--out", default=None)
    x.add_argument("--threads", type=int, default=None)
    x.set_defaults(fn=cmd_experiment)

    r = sub.add_parser("report", help="print an experiment summary")
    r.add_argument("--dir", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
