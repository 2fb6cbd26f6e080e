"""Curriculum adaptation from daytime to darker domains.

Domains are ordered by darkness (index 1 = daytime). The step from domain
``z-1`` to ``z``:

1. runs the current model over the real images of domain ``z-1``;
2. turns the predictions into pseudo-labels, refined with the
   corresponding daytime predictions when ``z-1 > 1``, plain argmax
   otherwise;
3. writes a training manifest holding the labeled synthetic images of
   domain ``z`` (loss weight 1) and the pseudo-labeled real images of domain
   ``z-1`` (loss weight ``mu``);
4. runs the trainer on that manifest.

Inference and training are external commands. Their templates are split
like a shell line and each argument is filled from ``{manifest}``,
``{outdir}``, ``{model_in}`` and ``{model_out}``. The inference command must
write one ``<outdir>/<id>.sftp`` soft tensor per manifest record.
"""
from __future__ import annotations

import json
import logging
import os
import re
import shlex
import shutil
import string
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bilateral import BilateralParams
from .core import ClassSet, DarksegError, ValidationError
from .gps import DEFAULT_MAX_DIST_M, match_nearest
from .io import (Manifest, ManifestRecord, SOFT_SUFFIX, read_manifest, read_rgb, read_soft,
                 write_label_png, write_manifest, write_matches_csv)
from .refine import FusionParams, refine_guided

log = logging.getLogger(__name__)

LABELED_SYNTHETIC = "labeled_synthetic"
PSEUDO_REAL = "pseudo_real"
PLACEHOLDERS = {"manifest", "outdir", "model_in", "model_out"}
REQUIRED_PLACEHOLDERS = {"manifest", "outdir"}
_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


class StepFailed(DarksegError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class DomainSpec:
    index: int
    name: str
    unlabeled_real: Path
    labeled_synthetic: Path | None = None


@dataclass
class StepConfig:
    inference_command: str
    trainer_command: str
    initial_model: str
    workdir: Path
    mu: float = 1.0
    iterations: int = 30000  # informational, forwarded in reports only
    max_dist: float = DEFAULT_MAX_DIST_M
    min_match_coverage: float = 0.0
    regenerate_day_guidance: bool = False
    classes: ClassSet = field(default_factory=ClassSet)
    bilateral: BilateralParams | None = None
    fusion: FusionParams = field(default_factory=FusionParams)
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        if not self.mu > 0:
            raise ValidationError(f"mu must be positive, got {self.mu}")
        if not 0.0 <= self.min_match_coverage <= 1.0:
            raise ValidationError("min_match_coverage must lie in [0, 1]")
        for name in ("inference_command", "trainer_command"):
            check_template(getattr(self, name), name)


def template_fields(template: str) -> set[str]:
    return {f for _, f, _, _ in string.Formatter().parse(template) if f}


def check_template(template: str, name: str) -> None:
    if not template or not template.strip():
        raise ValidationError(f"{name} is empty")
    fields = template_fields(template)
    unknown = fields - PLACEHOLDERS
    if unknown:
        raise ValidationError(f"{name}: unknown placeholders {sorted(unknown)}")
    missing = REQUIRED_PLACEHOLDERS - fields
    if missing:
        raise ValidationError(f"{name}: missing placeholders {sorted('{' + m + '}' for m in missing)}")


def render_command(template: str, **values) -> list[str]:
    return [arg.format(**{k: str(v) for k, v in values.items()}) for arg in shlex.split(template)]


@dataclass
class Step:
    number: int
    source: DomainSpec
    target: DomainSpec
    guided: bool
    model_in: str
    model_out: str
    workdir: Path
    day_domain: DomainSpec | None = None
    day_soft_dir: Path | None = None
    regenerate_day: bool = False

    @property
    def soft_dir(self) -> Path:
        return self.workdir / "soft"

    @property
    def pseudo_dir(self) -> Path:
        return self.workdir / "pseudo"

    @property
    def pseudo_manifest(self) -> Path:
        return self.workdir / "pseudo.jsonl"

    @property
    def train_manifest(self) -> Path:
        return self.workdir / "train.jsonl"

    @property
    def report_path(self) -> Path:
        return self.workdir / "report.json"

    def describe(self) -> dict:
        d = {
            "step": self.number,
            "source": {"index": self.source.index, "name": self.source.name},
            "target": {"index": self.target.index, "name": self.target.name},
            "guided": self.guided,
            "model_in": self.model_in,
            "model_out": self.model_out,
            "artifacts": {
                "soft_dir": str(self.soft_dir),
                "pseudo_dir": str(self.pseudo_dir),
                "pseudo_manifest": str(self.pseudo_manifest),
                "train_manifest": str(self.train_manifest),
                "report": str(self.report_path),
            },
        }
        if self.guided:
            d["artifacts"]["day_soft_dir"] = str(self.day_soft_dir)
            d["artifacts"]["correspondences"] = str(self.workdir / "correspondences.csv")
        return d


def check_domains(domains: list[DomainSpec]) -> None:
    if len(domains) < 2:
        raise ValidationError("a curriculum needs at least two domains")
    idx = [d.index for d in domains]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValidationError(f"domains must be listed in strictly increasing index order, got {idx}")
    if idx[0] < 1:
        raise ValidationError("domain indices start at 1 (daytime)")
    for d in domains:
        if not Path(d.unlabeled_real).is_file():
            raise ValidationError(f"domain {d.index} ({d.name}): unlabeled real manifest not found: {d.unlabeled_real}")
    for d in domains[1:]:
        if d.labeled_synthetic is None:
            raise ValidationError(f"domain {d.index} ({d.name}) needs a labeled synthetic manifest")
        if not Path(d.labeled_synthetic).is_file():
            raise ValidationError(f"domain {d.index} ({d.name}): labeled synthetic manifest not found: {d.labeled_synthetic}")


def plan(domains: list[DomainSpec], cfg: StepConfig) -> list[Step]:
    """One step per consecutive pair of domains, in darkness order."""
    check_domains(domains)
    day = domains[0] if domains[0].index == 1 else None
    steps = []
    model = cfg.initial_model
    first_day_soft = None
    for n, (src, tgt) in enumerate(zip(domains, domains[1:]), 1):
        wd = cfg.workdir / f"step{n}_{src.name}_to_{tgt.name}"
        guided = src.index > 1
        step = Step(n, src, tgt, guided, model, str(cfg.workdir / "models" / f"{tgt.name}"), wd)
        if src.index == 1:
            first_day_soft = step.soft_dir
        if guided:
            if day is None:
                raise ValidationError(f"step {n}: guided refinement needs the daytime domain (index 1) in the plan")
            step.day_domain = day
            if cfg.regenerate_day_guidance or first_day_soft is None:
                step.regenerate_day = True
                step.day_soft_dir = wd / "day_soft"
            else:
                # daytime predictions of the initial model, produced by step 1
                step.day_soft_dir = first_day_soft
        steps.append(step)
        model = step.model_out
    for s in steps:
        assert s.source.index < s.target.index
        assert s.guided == (s.source.index > 1)
    return steps


def emit_manifest(synthetic: Manifest, pseudo: Manifest, mu: float, root=None) -> Manifest:
    """Concatenate labeled synthetic (weight 1) and pseudo-labeled (weight mu) records.

    Paths are rewritten relative to `root` (default: the pseudo manifest's
    directory). Every referenced file must exist.
    """
    if mu < 0:
        raise ValidationError(f"mu must be non-negative, got {mu}")
    root = Path(root) if root is not None else pseudo.root
    recs = []
    seen_labels = {}
    missing = []
    for man, weight, origin in ((synthetic, 1.0, LABELED_SYNTHETIC), (pseudo, float(mu), PSEUDO_REAL)):
        for r in man:
            if r.label_path is None:
                raise ValidationError(f"{origin} record {r.id!r} has no label_path")
            img, lab = man.resolve(r.image_path), man.resolve(r.label_path)
            missing += [p for p in (img, lab) if not p.exists()]
            key = os.path.normpath(lab.absolute())
            if key in seen_labels:
                raise ValidationError(f"label path {lab} used by both {seen_labels[key]!r} and {r.id!r}")
            seen_labels[key] = r.id
            recs.append(ManifestRecord(
                id=f"{origin}/{r.id}", image_path=str(img), label_path=str(lab),
                domain=r.domain, loss_weight=weight, origin=origin,
            ))
    if missing:
        raise ValidationError(f"{len(missing)} referenced files do not exist, e.g. {missing[0]}")
    return Manifest(recs, Path("/")).rebased(root)


@dataclass
class StepReport:
    step: int
    source: str
    target: str
    guided: bool
    mu: float
    status: str = "planned"
    dry_run: bool = False
    images_inferred: int = 0
    pseudo_labels: int = 0
    pixels_refined: int = 0
    unmatched: int = 0
    synthetic_records: int = 0
    pseudo_records: int = 0
    manifest_consumed: bool = False
    iterations: int = 0
    commands: list = field(default_factory=list)
    planned: dict = field(default_factory=dict)
    diagnostics: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _run(cmd: list[str], env: dict, report: StepReport, what: str) -> None:
    t0 = time.perf_counter()
    log.info("running %s: %s", what, shlex.join(cmd))
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, env={**os.environ, **env})
    except OSError as e:
        report.commands.append({"what": what, "args": cmd, "returncode": None, "seconds": 0.0})
        report.status = "failed"
        report.diagnostics = f"{what} could not be started: {e}"
        raise StepFailed(report.diagnostics, report) from e
    report.commands.append({"what": what, "args": cmd, "returncode": proc.returncode,
                            "seconds": round(time.perf_counter() - t0, 3)})
    if proc.returncode != 0:
        report.status = "failed"
        tail = "\n".join((proc.stderr or proc.stdout or "").splitlines()[-20:])
        report.diagnostics = f"{what} exited with status {proc.returncode}\n{tail}"
        raise StepFailed(report.diagnostics, report)


def _check_ids(man: Manifest, what: str) -> None:
    bad = [r.id for r in man if not _SAFE_ID.match(r.id)]
    if bad:
        raise ValidationError(f"{what}: record ids must be file-name safe, got {bad[0]!r}")


def _infer(step: Step, manifest_path: Path, outdir: Path, model: str, cfg: StepConfig, report: StepReport) -> Manifest:
    man = read_manifest(manifest_path)
    _check_ids(man, str(manifest_path))
    outdir.mkdir(parents=True, exist_ok=True)
    cmd = render_command(cfg.inference_command, manifest=Path(manifest_path).absolute(), outdir=outdir.absolute(),
                         model_in=model, model_out=step.model_out)
    _run(cmd, cfg.env, report, "inference")
    missing = [r.id for r in man if not (outdir / f"{r.id}{SOFT_SUFFIX}").is_file()]
    if missing:
        report.status = "failed"
        report.diagnostics = f"inference wrote no soft tensor for {len(missing)} images, e.g. {missing[0]!r}"
        raise StepFailed(report.diagnostics, report)
    return man


def run_step(step: Step, cfg: StepConfig, dry_run: bool = False) -> StepReport:
    """Execute (or with `dry_run`, only validate) one adaptation step."""
    report = StepReport(step.number, step.source.name, step.target.name, step.guided, cfg.mu,
                        dry_run=dry_run, iterations=cfg.iterations, planned=step.describe())
    if dry_run:
        for name in ("inference_command", "trainer_command"):
            exe = shlex.split(getattr(cfg, name))[0]
            if shutil.which(exe) is None and not Path(exe).exists():
                raise ValidationError(f"{name}: executable {exe!r} not found")
        src = read_manifest(step.source.unlabeled_real)
        _check_ids(src, str(step.source.unlabeled_real))
        syn = read_manifest(step.target.labeled_synthetic)
        report.images_inferred = len(src)
        report.synthetic_records = len(syn)
        if step.guided:
            day = read_manifest(step.day_domain.unlabeled_real)
            src.gps_items()
            day.gps_items()
        return report

    step.workdir.mkdir(parents=True, exist_ok=True)
    src = _infer(step, Path(step.source.unlabeled_real), step.soft_dir, step.model_in, cfg, report)
    report.images_inferred = len(src)
    step.pseudo_dir.mkdir(parents=True, exist_ok=True)
    pseudo = []
    if step.guided:
        day_path = Path(step.day_domain.unlabeled_real)
        if step.regenerate_day:
            _infer(step, day_path, step.day_soft_dir, step.model_in, cfg, report)
        day = read_manifest(day_path)
        matches = match_nearest(src.gps_items(), day.gps_items(), cfg.max_dist)
        with open(step.workdir / "correspondences.csv", "w", newline="") as fh:
            write_matches_csv(matches, fh)
        matched = [m for m in matches if m.matched]
        report.unmatched = len(matches) - len(matched)
        coverage = len(matched) / len(matches) if matches else 0.0
        if coverage < cfg.min_match_coverage:
            report.status = "failed"
            report.diagnostics = (f"only {coverage:.1%} of {step.source.name} images have a daytime match "
                                  f"within {cfg.max_dist} m (floor {cfg.min_match_coverage:.1%})")
            raise StepFailed(report.diagnostics, report)
        by_id = {r.id: r for r in src}
        for m in matched:
            rec = by_id[m.query_id]
            dark = read_soft(step.soft_dir / f"{rec.id}{SOFT_SUFFIX}")
            day_soft = read_soft(step.day_soft_dir / f"{m.day_id}{SOFT_SUFFIX}")
            rgb = read_rgb(src.resolve(rec.image_path))
            ref = refine_guided(dark, rgb, day_soft, cfg.classes, cfg.bilateral, cfg.fusion)
            out = step.pseudo_dir / f"{rec.id}.png"
            write_label_png(out, ref.labels)
            report.pixels_refined += int(ref.labels.size)
            pseudo.append((rec, out))
    else:
        for rec in src:
            soft = read_soft(step.soft_dir / f"{rec.id}{SOFT_SUFFIX}")
            out = step.pseudo_dir / f"{rec.id}.png"
            write_label_png(out, np.argmax(soft, axis=0).astype(np.uint8))
            pseudo.append((rec, out))
    report.pseudo_labels = len(pseudo)

    pseudo_man = Manifest([ManifestRecord(r.id, str(src.resolve(r.image_path).absolute()), str(p.absolute()),
                                          domain=step.source.name, gps=r.gps) for r, p in pseudo], Path("/"))
    pseudo_man = pseudo_man.rebased(step.workdir)
    write_manifest(step.pseudo_manifest, pseudo_man)
    syn = read_manifest(step.target.labeled_synthetic)
    train = emit_manifest(syn, pseudo_man, cfg.mu, step.workdir)
    write_manifest(step.train_manifest, train)
    report.synthetic_records = len(syn)
    report.pseudo_records = len(pseudo_man)

    cmd = render_command(cfg.trainer_command, manifest=step.train_manifest.absolute(), outdir=step.workdir.absolute(),
                         model_in=step.model_in, model_out=step.model_out)
    try:
        _run(cmd, cfg.env, report, "trainer")
    finally:
        step.report_path.write_text(report.to_json())
    report.manifest_consumed = True
    report.status = "ok"
    step.report_path.write_text(report.to_json())
    return report


def run_plan(steps: list[Step], cfg: StepConfig, dry_run: bool = False) -> list[StepReport]:
    """Run steps strictly in order; the first failure aborts the rest."""
    reports = []
    for step in steps:
        log.info("step %d: %s -> %s (%s)", step.number, step.source.name, step.target.name,
                 "guided" if step.guided else "argmax pseudo-labels")
        reports.append(run_step(step, cfg, dry_run))
    return reports


def load_plan_config(path) -> tuple[list[DomainSpec], StepConfig]:
    """Read a curriculum config (JSON); relative paths resolve against its directory."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: {e}") from e
    base = path.parent

    def p(x):
        if x is None:
            return None
        x = Path(x)
        return x if x.is_absolute() else base / x

    try:
        domains = [DomainSpec(int(x["index"]), str(x["name"]), p(x["unlabeled_real"]), p(x.get("labeled_synthetic")))
                   for x in d["domains"]]
        cfg = StepConfig(
            inference_command=d["inference_command"],
            trainer_command=d["trainer_command"],
            initial_model=str(d["initial_model"]),
            workdir=p(d.get("workdir", "curriculum_run")),
            mu=float(d.get("mu", 1.0)),
            iterations=int(d.get("iterations", 30000)),
            max_dist=float(d.get("max_dist", DEFAULT_MAX_DIST_M)),
            min_match_coverage=float(d.get("min_match_coverage", 0.0)),
            regenerate_day_guidance=bool(d.get("regenerate_day_guidance", False)),
            classes=ClassSet.from_dict(d["classes"]) if "classes" in d else ClassSet(),
            bilateral=BilateralParams(**d["bilateral"]) if "bilateral" in d else None,
            fusion=FusionParams(**d.get("fusion", {})),
            env={str(k): str(v) for k, v in d.get("env", {}).items()},
        )
    except KeyError as e:
        raise ValidationError(f"{path}: missing key {e}") from e
    return domains, cfg
