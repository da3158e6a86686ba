"""Combined attack and the end-to-end experiment runner.

``run_experiment`` executes a fixed sequence of stages and records each
finished stage, with checksums of the files it wrote, in ``manifest.json``.
A rerun in the same directory with the same configuration reuses every stage
whose recorded files are intact and recomputes the rest, so an interrupted
run resumes where it stopped. Wall-clock timings go to ``timings.json``; the
manifest itself holds only content that is reproducible byte for byte.
"""
import csv
import json
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..artifacts import AttackArtifact, perturbation_norms
from ..checkpoint import file_sha256
from ..data import NamingScheme, bundle_fingerprint, generate_synthetic, load_directory_dataset
from ..defense import BASELINE_CONDITION, defense_sweep, read_sweep_csv, write_sweep_csv
from ..exceptions import ConfigError
from ..metrics import evaluate_reid
from ..misrank import DeepMisRanking, attack_query_set_dmr
from ..model import ReIDVictim
from ..pfgsm import attack_query_set_pfgsm
from .config import validate_order

METHODS = ("NoAttack", "DeepMisRanking", "PFGSM", "Combined")
METHOD_LABELS = {"dmr": "DeepMisRanking", "pfgsm": "PFGSM", "combined": "Combined"}
RESULT_COLUMNS = ("dataset", "method", "mAP", "R-1", "R-5", "R-10")
AUDIT_COLUMNS = ("order", "mAP", "R-1", "R-5", "R-10")
STAGES = ("victim", "pfgsm", "dmr_train", "dmr", "combined", "results", "defense", "report")
MANIFEST_NAME = "manifest.json"
TIMINGS_NAME = "timings.json"
COMBINED_BUDGET_NOTE = ("combined stages keep separate L-inf budgets; images are clamped to "
                        "[0, 1] after every stage")
PFGSM_CLASS_NOTE = ("P-FGSM protects the victim's predicted train identity of each query; test "
                    "identities are outside the classifier's label space")


# -- combined attack ----------------------------------------------------------


def run_combined_attack(model, bundle, pfgsm_config, trained_dmr, order=("pfgsm", "dmr"),
                        n_jobs=None):
    """Chain the attacks over the query set, each stage consuming the previous output.

    Norms per stage are relative to that stage's input; the artifact's
    overall norms and MS-SSIM compare the final images with the clean queries.
    """
    order = validate_order(order)
    if "dmr" in order and trained_dmr is None:
        raise ConfigError("combined order includes 'dmr' but no trained attacker was given")
    clean = bundle.images("query")
    current = clean
    stages, traces = [], [{} for _ in range(len(clean))]
    for name in order:
        if name == "pfgsm":
            art = attack_query_set_pfgsm(model, bundle, pfgsm_config, n_jobs=n_jobs,
                                         images=current)
        else:
            art = attack_query_set_dmr(trained_dmr, bundle, images=current)
        out = np.clip(art.perturbed, 0.0, 1.0)
        linf, l2 = perturbation_norms(current, out)
        stages.append({"name": name, "linf": linf, "l2": l2})
        for row, extra in zip(traces, art.traces):
            row.update({f"{name}_{k}": v for k, v in extra.items()})
        current = out
    meta = {"order": list(order), "budget": COMBINED_BUDGET_NOTE}
    return AttackArtifact.build("combined", bundle.sample_ids("query"), clean, current,
                                traces=traces, stages=stages, meta=meta)


# -- tables ---------------------------------------------------------------------


def write_results_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow([r["dataset"], r["method"]]
                            + [f"{r[k]:.2f}" for k in RESULT_COLUMNS[2:]])


def read_results_csv(path):
    with open(path, newline="") as fh:
        return [{"dataset": r["dataset"], "method": r["method"],
                 **{k: float(r[k]) for k in RESULT_COLUMNS[2:]}} for r in csv.DictReader(fh)]


def write_audit_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AUDIT_COLUMNS)
        for r in rows:
            writer.writerow([r["order"]] + [f"{r[k]:.2f}" for k in AUDIT_COLUMNS[1:]])


def read_audit_csv(path):
    with open(path, newline="") as fh:
        return [{"order": r["order"], **{k: float(r[k]) for k in AUDIT_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]


# -- experiment -----------------------------------------------------------------


def build_bundle(config):
    ds = config.dataset
    if ds.kind == "synthetic":
        return generate_synthetic(ds.synthetic_spec(config.seed))
    return load_directory_dataset(ds.path, NamingScheme[ds.scheme.upper()], frozenset(ds.junk_ids))


def environment_fingerprint():
    import sklearn
    import torch
    return {"python": platform.python_version(), "machine": platform.machine(),
            "system": platform.system(), "numpy": np.__version__, "torch": torch.__version__,
            "scikit-learn": sklearn.__version__, "torch_threads": torch.get_num_threads()}


@dataclass
class ExperimentResult:
    manifest: dict
    results: list
    sweep: list
    output_dir: Path


class _Run:
    """Stage bookkeeping: manifest persistence and resume checks."""

    def __init__(self, config, output_dir, resume):
        self.config = config
        self.out = Path(output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.timings = {}
        previous = self._read_manifest() if resume else None
        if previous and previous.get("config_fingerprint") != config.fingerprint():
            previous = None
        self.reusable = {s["name"]: s for s in (previous or {}).get("stages", [])}
        self.chain_intact = True
        self.manifest = {
            "toolkit": {"name": "reidattack", "version": __version__},
            "config": config.to_dict(include_output=False),
            "config_fingerprint": config.fingerprint(),
            "environment": environment_fingerprint(),
            "inputs": {},
            "notes": {"combined_budget": COMBINED_BUDGET_NOTE, "pfgsm_protected_class":
                      PFGSM_CLASS_NOTE, "quantization": "PNG copies are 8-bit round-half-even; "
                      "evaluation uses float64 images.npy", "timings": TIMINGS_NAME},
            "stages": [],
            "status": "incomplete",
        }

    def _read_manifest(self):
        path = self.out / MANIFEST_NAME
        if not path.is_file():
            return None
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError:
            return None

    def can_reuse(self, name):
        """True when ``name`` finished before and its files are still intact."""
        entry = self.reusable.get(name)
        ok = self.chain_intact and entry is not None and all(
            (self.out / rel).is_file() and file_sha256(self.out / rel) == digest
            for rel, digest in entry["outputs"].items())
        self.chain_intact = ok
        return ok

    def files_under(self, *rels):
        found = []
        for rel in rels:
            p = self.out / rel
            found.extend(sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p])
        return {str(q.relative_to(self.out).as_posix()): file_sha256(q) for q in found}

    def finish(self, name, outputs, started, reused, extra=None):
        entry = {"name": name, "outputs": outputs}
        if extra:
            entry.update(extra)
        self.manifest["stages"].append(entry)
        self.timings[name] = {"seconds": round(time.perf_counter() - started, 3),
                              "reused": reused}
        self.write()

    def write(self):
        text = json.dumps(self.manifest, indent=2, sort_keys=True) + "\n"
        (self.out / MANIFEST_NAME).write_text(text)
        (self.out / TIMINGS_NAME).write_text(json.dumps(self.timings, indent=2) + "\n")


def _load_artifact(out, name):
    return AttackArtifact.load(out / "artifacts" / name)


def run_experiment(config, output_dir=None, resume=True, stop_after=None):
    """Run (or resume) the full experiment; returns an :class:`ExperimentResult`.

    ``stop_after`` names a stage after which to stop early, leaving an
    incomplete but resumable manifest.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}; stages are {list(STAGES)}")
    out = Path(output_dir if output_dir is not None else config.output_dir)
    run = _Run(config, out, resume)
    seed, n_jobs = config.seed, config.n_jobs
    protocol = config.protocol.to_protocol()
    label = config.dataset.label

    bundle = build_bundle(config)
    run.manifest["inputs"]["dataset"] = {"label": label, "fingerprint": bundle_fingerprint(bundle)}

    def stage(name):
        return name, time.perf_counter(), run.can_reuse(name)

    # victim
    name, t0, reuse = stage("victim")
    ckpt = out / "checkpoints" / "victim.ckpt"
    if config.model.checkpoint:
        run.manifest["inputs"]["victim_checkpoint"] = file_sha256(config.model.checkpoint)
    if reuse:
        victim = ReIDVictim.load(ckpt)
    elif config.model.checkpoint:
        victim = ReIDVictim.load(config.model.checkpoint)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        victim.save(ckpt)
    else:
        victim = ReIDVictim(**config.model.estimator_params(seed)).fit(
            bundle.images("train"), bundle.person_ids("train"))
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        victim.save(ckpt)
    run.finish(name, run.files_under("checkpoints/victim.ckpt"), t0, reuse,
               {"parameter_checksum": victim.parameter_checksum()})
    if stop_after == name:
        return _partial(run)

    # P-FGSM
    name, t0, reuse = stage("pfgsm")
    pf_cfg = config.pfgsm.to_config(seed)
    if reuse:
        pfgsm_art = _load_artifact(out, "pfgsm")
    else:
        pfgsm_art = attack_query_set_pfgsm(victim, bundle, pf_cfg, n_jobs=n_jobs)
        pfgsm_art.save(out / "artifacts" / "pfgsm")
    run.finish(name, run.files_under("artifacts/pfgsm"), t0, reuse)
    if stop_after == name:
        return _partial(run)

    # DMR training
    name, t0, reuse = stage("dmr_train")
    dmr_ckpt = out / "checkpoints" / "dmr.ckpt"
    if config.misrank.checkpoint:
        run.manifest["inputs"]["dmr_checkpoint"] = file_sha256(config.misrank.checkpoint)
    if reuse:
        attacker = DeepMisRanking.load(dmr_ckpt, victim)
    elif config.misrank.checkpoint:
        attacker = DeepMisRanking.load(config.misrank.checkpoint, victim)
        attacker.save(dmr_ckpt)
        attacker.write_history(out / "dmr_history.csv")
    else:
        attacker = DeepMisRanking(victim=victim, **config.misrank.estimator_params(seed)).fit(
            bundle.images("train"), bundle.person_ids("train"))
        attacker.save(dmr_ckpt)
        attacker.write_history(out / "dmr_history.csv")
    run.finish(name, run.files_under("checkpoints/dmr.ckpt", "dmr_history.csv"), t0, reuse)
    if stop_after == name:
        return _partial(run)

    # DMR on the queries
    name, t0, reuse = stage("dmr")
    if reuse:
        dmr_art = _load_artifact(out, "dmr")
    else:
        dmr_art = attack_query_set_dmr(attacker, bundle)
        dmr_art.save(out / "artifacts" / "dmr")
    run.finish(name, run.files_under("artifacts/dmr"), t0, reuse)
    if stop_after == name:
        return _partial(run)

    # combined (plus the reversed order, audited side by side)
    name, t0, reuse = stage("combined")
    order = tuple(config.combined.order)
    reversed_order = tuple(reversed(order))
    audit = config.combined.audit_reversed_order and len(order) > 1
    dirs = ["artifacts/combined"] + (["artifacts/combined_reversed"] if audit else [])
    if reuse:
        combined_art = _load_artifact(out, "combined")
        reversed_art = _load_artifact(out, "combined_reversed") if audit else None
    else:
        combined_art = run_combined_attack(victim, bundle, pf_cfg, attacker, order, n_jobs)
        combined_art.save(out / "artifacts" / "combined")
        reversed_art = None
        if audit:
            reversed_art = run_combined_attack(victim, bundle, pf_cfg, attacker, reversed_order,
                                               n_jobs)
            reversed_art.save(out / "artifacts" / "combined_reversed")
    run.finish(name, run.files_under(*dirs), t0, reuse)
    if stop_after == name:
        return _partial(run)

    # results table
    name, t0, reuse = stage("results")
    conditions = {"NoAttack": None, "DeepMisRanking": dmr_art, "PFGSM": pfgsm_art,
                  "Combined": combined_art}
    if reuse:
        results = read_results_csv(out / "results_table.csv")
    else:
        results = []
        for method in METHODS:
            art = conditions[method]
            rep = evaluate_reid(victim, bundle, protocol,
                                query_override=None if art is None else art.perturbed)
            results.append({"dataset": label, "method": method, **rep.metrics()})
        write_results_csv(results, out / "results_table.csv")
        if audit:
            rows = []
            for o, art in ((order, combined_art), (reversed_order, reversed_art)):
                rep = evaluate_reid(victim, bundle, protocol, query_override=art.perturbed)
                rows.append({"order": ">".join(o), **rep.metrics()})
            write_audit_csv(rows, out / "order_audit.csv")
    run.finish(name, run.files_under("results_table.csv",
                                     *(["order_audit.csv"] if audit else [])), t0, reuse)
    if stop_after == name:
        return _partial(run)

    # defense sweep
    name, t0, reuse = stage("defense")
    if reuse:
        sweep = read_sweep_csv(out / "defense_sweep.csv")
    else:
        sweep = defense_sweep(victim, bundle, conditions, rates=config.defense.rates,
                              protocol=protocol, passes=config.defense.passes, seed=seed)
        write_sweep_csv(sweep, out / "defense_sweep.csv")
    run.finish(name, run.files_under("defense_sweep.csv"), t0, reuse)
    if stop_after == name:
        return _partial(run)

    # report
    from .report import emit_report
    name, t0, reuse = stage("report")
    if not reuse:
        emit_report(out)
    run.finish(name, run.files_under("report.md", "plots"), t0, reuse)
    run.manifest["status"] = "complete"
    run.write()
    return ExperimentResult(run.manifest, results, sweep, out)


def _partial(run):
    run.write()
    return ExperimentResult(run.manifest, [], [], run.out)
