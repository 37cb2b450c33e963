"""Experiment stages over a work directory.

Layout of a work directory::

    data/                      dataset arrays + dataset.json
    models/*.ckpt              autoencoder, rldm, fr-surrogate, fr-victim-<k>[-robust]
    attacks/<variant>/seed<s>/ x_adv.npy, x_ref.npy, loss_trace.tsv, pair_<i>.pgm, attack.json
    report.txt, report.json, asr_curve.tsv

Each stage checks its upstream artifacts, never modifies them, and records the
resolved config plus the digest of every checkpoint it read.
"""
import json
import logging
import os
import zlib
from pathlib import Path

import numpy as np

from . import dataio, facerec, metrics
from .attack import ROW_LABELS, VARIANTS, AttackConfig, run_attack
from .config import canonical_json
from .diffusion import make_ddim_subsequence, make_linear_schedule
from .rldm import (
    RLDM,
    Autoencoder,
    AutoencoderConfig,
    ConditionalUNet,
    UNetConfig,
    rldm_config_dict,
    rldm_from_state,
    train_autoencoder,
    train_rldm,
)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    code = "stage_failed"


class MissingArtifact(StageError):
    code = "missing_artifact"


class LockHeld(StageError):
    code = "locked"


def sub_seed(seed, name):
    """Independent, stable integer seed per named stage."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


class WorkDir:
    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.models = self.root / "models"
        self.attacks = self.root / "attacks"

    def model(self, name):
        return self.models / f"{name}.ckpt"

    def attack_dir(self, variant, seed):
        return self.attacks / variant / f"seed{seed}"

    def require(self, path, what):
        if not Path(path).exists():
            raise MissingArtifact(f"{what} not found at {self.rel(path)}; run the upstream stage first")
        return Path(path)

    def rel(self, path):
        try:
            return str(Path(path).relative_to(self.root))
        except ValueError:
            return Path(path).name


class Lock:
    """Exclusive ownership of a work directory for one command invocation."""

    def __init__(self, root):
        self.path = Path(root) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(f"output directory is in use (lockfile {self.path.name} exists)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _provenance(cfg, wd, inputs):
    return {
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "inputs": {wd.rel(p): dataio.file_digest(p) for p in inputs},
    }


def _comment_lines(prov):
    return [f"config {canonical_json(prov['config'])}"] + [f"input {k} sha256 {v}" for k, v in sorted(prov["inputs"].items())]


# ------------------------------------------------------------------------ data


def gen_data(cfg, wd):
    d = cfg.data
    ds = dataio.build_dataset(
        seed=cfg.seed,
        n_identities=d.n_identities,
        n_variants=d.n_variants,
        n_test_variants=d.n_test_variants,
        degradation=dataio.DegradationParams(d.blur_sigma, d.factor, d.noise_sigma),
        n_genuine_pairs=d.n_genuine_pairs,
        n_impostor_pairs=d.n_impostor_pairs,
        n_attack_pairs=d.n_attack_pairs,
    )
    ds.manifest["provenance"] = _provenance(cfg, wd, [])
    dataio.save_dataset(ds, wd.data)
    return ds


def load_data(wd):
    wd.require(wd.data / "dataset.json", "dataset")
    return dataio.load_dataset(wd.data)


def _train_images(ds):
    tr = ds.indices("train")
    return np.concatenate([ds.hq[tr], ds.degraded[tr]]), np.concatenate([ds.identity[tr]] * 2)


def _save_model(cfg, wd, name, kind, module, config, inputs):
    config = dict(config, provenance=_provenance(cfg, wd, inputs))
    wd.models.mkdir(parents=True, exist_ok=True)
    return dataio.save_checkpoint(wd.model(name), kind, module.state_dict(), config)


# ---------------------------------------------------------------------- models


def train_autoencoder_stage(cfg, wd):
    ds = load_data(wd)
    a = cfg.autoencoder
    ae_cfg = AutoencoderConfig(factor=cfg.data.factor, latent_channels=a.latent_channels, widths=tuple(a.widths))
    x, _ = _train_images(ds)
    ae = train_autoencoder(x, a.steps, a.batch_size, a.lr, seed=sub_seed(cfg.seed, "autoencoder"), cfg=ae_cfg)
    te = ds.hq[ds.indices("test")]
    rec = ae.decode(ae.encode(te))
    score = float(np.mean([metrics.psnr(r, t) for r, t in zip(rec, te)]))
    log.info("autoencoder held-out PSNR %.2f dB", score)
    _save_model(cfg, wd, "autoencoder", "autoencoder", ae, dict(ae.config_dict(), heldout_psnr=score), [wd.data / "dataset.json"])
    return ae


def load_autoencoder(wd):
    _, state, config = dataio.load_checkpoint(wd.require(wd.model("autoencoder"), "autoencoder checkpoint"), "autoencoder")
    return Autoencoder.from_state(state, config)


def train_rldm_stage(cfg, wd):
    ds = load_data(wd)
    ae = load_autoencoder(wd)
    r, s = cfg.rldm, cfg.schedule
    unet = ConditionalUNet(
        UNetConfig(ae.cfg.latent_channels, tuple(r.widths), r.time_dim), seed=sub_seed(cfg.seed, "unet-init")
    )
    sched = make_linear_schedule(s.n_steps, s.beta_start, s.beta_end)
    model = RLDM(ae, unet, sched, make_ddim_subsequence(s.n_steps, s.ddim_steps))
    tr = ds.indices("train")
    losses = train_rldm(model, ds.hq[tr], ds.degraded[tr], r.steps, r.batch_size, r.lr, seed=sub_seed(cfg.seed, "rldm"))
    head, tail = float(losses[:100].mean()), float(losses[-100:].mean())
    _save_model(
        cfg, wd, "rldm", "rldm", unet, dict(rldm_config_dict(model), loss_head=head, loss_tail=tail),
        [wd.data / "dataset.json", wd.model("autoencoder")],
    )
    return model


def load_rldm(wd, ddim_steps=None):
    ae = load_autoencoder(wd)
    _, state, config = dataio.load_checkpoint(wd.require(wd.model("rldm"), "rldm checkpoint"), "rldm")
    if ddim_steps is not None:
        config = dict(config, ddim_steps=list(make_ddim_subsequence(config["n_steps"], ddim_steps).steps))
    return rldm_from_state(ae, state, config)


def fr_names(cfg):
    names = ["fr-surrogate"]
    for a in cfg.fr.victim_arch_seeds:
        names += [f"fr-victim-{a}", f"fr-victim-{a}-robust"]
    return names


def train_fr_stage(cfg, wd):
    ds = load_data(wd)
    x, y = _train_images(ds)
    f = cfg.fr
    inputs = [wd.data / "dataset.json"]
    sur = facerec.train_fr_model(
        x, y, "surrogate", 0, steps=f.steps, batch_size=f.batch_size, lr=f.lr, seed=sub_seed(cfg.seed, "fr-surrogate")
    )
    _save_model(cfg, wd, "fr-surrogate", "fr", sur, sur.config_dict(), inputs)
    for a in f.victim_arch_seeds:
        name = f"fr-victim-{a}"
        vic = facerec.train_fr_model(
            x, y, "victim", a, steps=f.steps, batch_size=f.batch_size, lr=f.lr, seed=sub_seed(cfg.seed, name)
        )
        _save_model(cfg, wd, name, "fr", vic, vic.config_dict(), inputs)
        rob = facerec.adversarial_finetune(vic, x, y, f.robust_rho, f.robust_steps, seed=sub_seed(cfg.seed, name + "-robust"))
        _save_model(cfg, wd, name + "-robust", "fr", rob, dict(rob.config_dict(), robust=True), inputs + [wd.model(name)])


def load_fr(path):
    _, state, config = dataio.load_checkpoint(path, "fr")
    return facerec.EmbeddingModel.from_state(state, config)


# ---------------------------------------------------------------------- attack


def attack_config(cfg, variant, seed):
    a = cfg.attack
    return AttackConfig(a.beta, a.n_max, a.rho, seed, variant, a.dropout_p, a.exact_clip_grad)


def attack_stage(cfg, wd, variant=None, surrogate_path=None, ddim_steps=None):
    variant = variant or cfg.attack.variant
    ds = load_data(wd)
    sur_path = Path(surrogate_path) if surrogate_path else wd.require(wd.model("fr-surrogate"), "surrogate checkpoint")
    if not sur_path.exists():
        raise MissingArtifact(f"surrogate checkpoint not found at {sur_path.name}")
    surrogate = load_fr(sur_path)
    inputs = [wd.data / "dataset.json", sur_path]
    model = None
    if variant.startswith("advrestore"):
        model = load_rldm(wd, ddim_steps or cfg.schedule.ddim_steps)
        inputs += [wd.model("autoencoder"), wd.model("rldm")]
    prov = _provenance(cfg, wd, inputs)
    for seed in cfg.attack_seeds:
        pairs = np.array(dataio.sample_attack_pairs(ds, cfg.data.n_attack_pairs, seed))
        xs, xt = ds.degraded[pairs[:, 0]], ds.hq[pairs[:, 1]]
        res = run_attack(xs, xt, model, surrogate, attack_config(cfg, variant, seed))
        _write_attack(wd.attack_dir(variant, seed), res, pairs, prov)
        log.info("%s seed %d: mean final surrogate loss %.4f", variant, seed, float(res.final_loss.mean()))


def _write_attack(out, res, pairs, prov):
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_array(out / "x_adv.npy", res.x_adv)
    dataio.save_array(out / "x_ref.npy", res.x_ref)
    comments = _comment_lines(prov)
    for i, img in enumerate(res.x_adv):
        dataio.save_image(out / f"pair_{i:03d}.pgm", img, comments)
    lines = [f"# {c}" for c in comments]
    lines.append("iteration\t" + "\t".join(f"pair_{i:03d}" for i in range(len(pairs))))
    rows = np.vstack([res.loss_trace, res.final_loss[None]])
    for it, row in enumerate(rows):
        lines.append(f"{it}\t" + "\t".join(f"{v:.6f}" for v in row))
    (out / "loss_trace.tsv").write_text("\n".join(lines) + "\n")
    dataio.write_manifest(
        out / "attack.json",
        {
            "variant": res.variant,
            "pairs": pairs.tolist(),
            "iterations_run": res.iterations_run,
            "budget_linf": res.budget_linf,
            "per_pair_budget_linf": np.max(np.abs(res.x_adv - res.x_ref), axis=(1, 2, 3)).tolist(),
            "final_loss": res.final_loss.tolist(),
            "provenance": prov,
        },
    )


def read_loss_trace(path):
    rows = [ln.split("\t") for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def load_attack(wd, variant, seed):
    out = wd.attack_dir(variant, seed)
    wd.require(out / "attack.json", f"{variant} attack results for seed {seed}")
    man = dataio.read_manifest(out / "attack.json")
    losses = read_loss_trace(out / "loss_trace.tsv")
    return {
        "x_adv": dataio.load_array(out / "x_adv.npy"),
        "x_ref": dataio.load_array(out / "x_ref.npy"),
        "pairs": np.array(man["pairs"]),
        "losses": losses,  # rows: before each iteration, then final
        "manifest": man,
    }


# -------------------------------------------------------------------- evaluate


def evaluate_stage(cfg, wd, victims=None, surrogate_path=None, variants=VARIANTS):
    ds = load_data(wd)
    sur_path = Path(surrogate_path) if surrogate_path else wd.require(wd.model("fr-surrogate"), "surrogate checkpoint")
    if victims:
        victim_paths = [Path(v) for v in victims]
    else:
        victim_paths = [wd.model(n) for n in fr_names(cfg)[1:]]
    for p in victim_paths + [sur_path]:
        if not p.exists():
            raise MissingArtifact(f"face model checkpoint not found at {p.name}")
    present = [v for v in variants if all((wd.attack_dir(v, s) / "attack.json").exists() for s in cfg.attack_seeds)]
    if not present:
        raise MissingArtifact("no complete attack results found; run the attack stage first")

    imp = np.array(ds.manifest["pairs"]["impostor"])
    gen = np.array(ds.manifest["pairs"]["genuine"])
    imp_x = (ds.hq[imp[:, 0]], ds.hq[imp[:, 1]])
    gen_x = (ds.hq[gen[:, 0]], ds.hq[gen[:, 1]])

    models = {}
    for p in [sur_path] + victim_paths:
        m = load_fr(p)
        thr = facerec.calibrate_threshold(m, *imp_x, far=cfg.fr.far)
        models[p.stem] = (m, thr, facerec.verification_accuracy(m, thr, gen_x, imp_x))
    sur_name = sur_path.stem
    victim_names = [p.stem for p in victim_paths]

    attacks = {(v, s): load_attack(wd, v, s) for v in present for s in cfg.attack_seeds}
    budget_violations = sum(
        int(np.sum(np.max(np.abs(a["x_adv"] - a["x_ref"]), axis=(1, 2, 3)) > cfg.attack.rho + 1e-9)) for a in attacks.values()
    )

    def asr(name, v, s):
        m, thr, _ = models[name]
        a = attacks[(v, s)]
        return metrics.attack_success_rate(facerec.pair_distances(m, a["x_adv"], ds.hq[a["pairs"][:, 1]]), thr.threshold, name)

    def benign_asr(name, s):
        m, thr, _ = models[name]
        pairs = attacks[(present[0], s)]["pairs"]
        d = facerec.pair_distances(m, ds.degraded[pairs[:, 0]], ds.hq[pairs[:, 1]])
        return metrics.attack_success_rate(d, thr.threshold, name).asr

    per_seed = {
        v: {n: [asr(n, v, s).asr for s in cfg.attack_seeds] for n in victim_names + [sur_name]} for v in present
    }
    plain = [n for n in victim_names if not n.endswith("-robust")]
    robust = [n for n in victim_names if n.endswith("-robust")]
    asr_normal = {ROW_LABELS[v]: {n: float(np.mean(per_seed[v][n])) for n in plain} for v in present}
    asr_robust = {ROW_LABELS[v]: {n: float(np.mean(per_seed[v][n])) for n in robust} for v in present} if robust else {}
    whitebox = {ROW_LABELS[v]: float(np.mean(per_seed[v][sur_name])) for v in present}

    quality = {}
    all_pairs = np.concatenate([attacks[(present[0], s)]["pairs"] for s in cfg.attack_seeds])
    src = ds.degraded[all_pairs[:, 0]]
    hq_src = ds.hq[all_pairs[:, 0]]
    quality["Benign"] = (metrics.quality_report(src, hq_src, "x_hq"), metrics.quality_report(src, src, "x_s"))
    for v in present:
        x_adv = np.concatenate([attacks[(v, s)]["x_adv"] for s in cfg.attack_seeds])
        quality[ROW_LABELS[v]] = (
            metrics.quality_report(x_adv, hq_src, "x_hq"),
            metrics.quality_report(x_adv, src, "x_s"),
        )

    s_thr = models[sur_name][1].threshold
    curves = {
        v: np.mean(
            [100.0 * (attacks[(v, s)]["losses"] < s_thr).mean(axis=1) for s in cfg.attack_seeds], axis=0
        )
        for v in present
    }

    inputs = [wd.data / "dataset.json"] + [sur_path] + victim_paths
    inputs += [wd.model(n) for n in ("autoencoder", "rldm") if wd.model(n).exists()]
    prov = _provenance(cfg, wd, inputs)
    preamble = [
        "AdvRestore desk-scale report",
        f"config sha256 {prov['config_sha256']}",
        f"attack seeds {', '.join(str(s) for s in cfg.attack_seeds)}; "
        f"rho {cfg.attack.rho:.6f}; beta {cfg.attack.beta:.6f}; n_max {cfg.attack.n_max}; "
        f"ddim steps {cfg.schedule.ddim_steps}",
    ]
    preamble += [f"input {k} sha256 {v}" for k, v in sorted(prov["inputs"].items())]
    preamble += ["", "Verification (FAR-calibrated thresholds on impostor pairs)"]
    preamble += [
        f"  {n}: far {thr.far:.3f} threshold {thr.threshold:.6f} accuracy {acc:.3f}"
        for n, (m, thr, acc) in sorted(models.items())
    ]
    preamble += [f"Budget violations: {budget_violations}", ""]
    text, manifest = metrics.emit_report(quality, asr_normal, asr_robust, whitebox, preamble)
    curve_lines = [f"# config sha256 {prov['config_sha256']}", "iteration\t" + "\t".join(ROW_LABELS[v] for v in present)]
    n_rows = min(len(c) for c in curves.values())
    for it in range(n_rows):
        curve_lines.append(f"{it}\t" + "\t".join(f"{curves[v][it]:.2f}" for v in present))
    text += "\nWhite-box ASR (%) vs iteration written to asr_curve.tsv\n"
    manifest.update(
        {
            "provenance": prov,
            "thresholds": {n: {"threshold": thr.threshold, "far": thr.far, "n_pairs": thr.n_pairs} for n, (m, thr, a) in models.items()},
            "verification_accuracy": {n: acc for n, (m, thr, acc) in models.items()},
            "asr_per_seed": {ROW_LABELS[v]: per_seed[v] for v in present},
            "asr_no_perturbation": {n: float(np.mean([benign_asr(n, s) for s in cfg.attack_seeds])) for n in models},
            "budget_violations": budget_violations,
            "asr_curve": {ROW_LABELS[v]: curves[v].tolist() for v in present},
        }
    )
    (wd.root / "report.txt").write_text(text)
    dataio.write_manifest(wd.root / "report.json", manifest)
    (wd.root / "asr_curve.tsv").write_text("\n".join(curve_lines) + "\n")
    return text, manifest


def reproduce_report(cfg, wd):
    gen_data(cfg, wd)
    train_autoencoder_stage(cfg, wd)
    train_rldm_stage(cfg, wd)
    train_fr_stage(cfg, wd)
    for v in VARIANTS:
        attack_stage(cfg, wd, v)
    return evaluate_stage(cfg, wd)


def dump_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
