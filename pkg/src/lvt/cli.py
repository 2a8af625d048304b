"""Command-line entry point.

Every subcommand reads a ``RunConfig`` (config file plus ``--key value``
overrides) and writes into a stage directory under the run root, which is
``--run-dir``, else ``$LVT_RUN_DIR``, else ``./runs``::

    data/       manifest.jsonl, pixels.lvt
    teacher/    teacher.lvt, eval.csv
    extract/    payload.lvt, trace.csv
    filter/     text_only.lvt, buckets.csv, counts.csv, retained.txt
    students/<name>/  student.lvt, losses.csv, metrics.csv
    probe/      probe.csv
    analysis/<name>/  perception_gap.csv, accuracy_vs_focus.csv, *.svg
    ablate/<variant>/ losses.csv, metrics.csv (plus ablate/summary.csv)

Each stage directory also receives ``config.txt`` (a snapshot sufficient to
re-run it) and ``log.txt``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import data as D
from .analysis import (
    accuracy_vs_focus_curve,
    attention_entropy,
    perception_gap_report,
    renormalize,
    write_entropy_histogram,
    write_focus_curve,
    write_gap_report,
)
from .config import ConfigError, RunConfig, load_config
from .experiment import (
    evaluate_student,
    make_corpus,
    make_student_config,
    make_teacher_config,
    naive_options,
    student_options,
    train_text_only,
)
from .io import ContainerError, load_checkpoint, read_container, read_csv, save_checkpoint, write_container, write_csv
from .losses import gradient_transition_probe
from .model import Model
from .pipeline import extract_supervision, model_gaze, run_filter
from .training import TeacherTrainingError, train_student, train_teacher

log = logging.getLogger("lvt")

PROBE_GAMMAS = (1e-6, 1e-3, 0.1, 0.5, 1.0)
LOSS_COLUMNS = ["step", "l_ntp", "l_concept", "l_traj", "l_total", "gamma"]
METRIC_COLUMNS = ["accuracy", "accuracy_masked", "mask_drop", "trajectory_kl", "entropy"]
ABLATIONS = ("full", "no_traj", "no_concept", "masked_latents", "single_stage", "k4", "k6", "k8")


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------
def run_root(explicit=None):
    return explicit or os.environ.get("LVT_RUN_DIR") or "runs"


class Stage:
    """A stage directory with its config snapshot and log file."""

    def __init__(self, root, name, cfg: RunConfig):
        self.root = root
        self.path = os.path.join(root, name)
        os.makedirs(self.path, exist_ok=True)
        with open(self.file("config.txt"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())
        self._handler = logging.FileHandler(self.file("log.txt"), mode="w", encoding="utf-8")
        self._handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger("lvt").addHandler(self._handler)

    def file(self, *parts):
        return os.path.join(self.path, *parts)

    def close(self):
        logging.getLogger("lvt").removeHandler(self._handler)
        self._handler.close()


def require(path, produced_by):
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {path}; run `lvt {produced_by}` first (same run directory)")
    return path


# ---------------------------------------------------------------------------
# artifact loading
# ---------------------------------------------------------------------------
def load_samples(root):
    manifest = require(os.path.join(root, "data", "manifest.jsonl"), "gen-data")
    pixels = read_container(require(os.path.join(root, "data", "pixels.lvt"), "gen-data"))
    samples = D.read_manifest(manifest, pixels)
    split = {"train": [], "val": [], "test": []}
    for s in samples:
        split[s.extra["split"]].append(s)
    return split


def load_model(path, produced_by):
    model, _ = load_checkpoint(require(path, produced_by))
    return model


def attach_supervision(root, samples):
    payload = read_container(require(os.path.join(root, "extract", "payload.lvt"), "extract"))
    flags = {r["sample_id"]: r for r in read_csv(os.path.join(root, "extract", "trace.csv"))}
    for s in samples:
        key = s.sample_id
        if f"{key}.gaze" not in payload:
            raise MissingArtifact(f"no supervision for {key} in extract/payload.lvt; re-run `lvt extract`")
        rec = flags[key]
        # payloads are stored in single precision; restore an exact distribution
        target = payload[f"{key}.sparse_target"].astype(np.float64)
        s.supervision = D.Supervision(
            gaze=payload[f"{key}.gaze"].astype(np.float64),
            a_traj=payload[f"{key}.a_traj"].astype(np.float64),
            sparse_target=target / target.sum(),
            v_sem=payload[f"{key}.v_sem"].astype(np.float64),
            focus=float(rec["focus"]) if rec["focus"] else None,
            degenerate=rec["degenerate"] == "1",
        )
    return samples


def retained_samples(root, train):
    path = require(os.path.join(root, "filter", "retained.txt"), "filter")
    with open(path, encoding="utf-8") as fh:
        keep = {line.strip() for line in fh if line.strip()}
    return [s for s in train if s.sample_id in keep]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_gen_data(cfg, root, args):
    st = Stage(root, "data", cfg)
    train, val, test = make_corpus(cfg)
    for name, part in (("train", train), ("val", val), ("test", test)):
        for s in part:
            s.extra["split"] = name
    everything = train + val + test
    D.write_manifest(st.file("manifest.jsonl"), everything, payload_file="pixels.lvt")
    write_container(st.file("pixels.lvt"), {s.sample_id: s.pixels for s in everything})
    rows = [{"split": n, "qtype": q, "count": sum(s.qtype == q for s in p)}
            for n, p in (("train", train), ("val", val), ("test", test)) for q in D.QTYPES]
    write_csv(st.file("counts.csv"), rows, ["split", "qtype", "count"])
    log.info("wrote %d samples", len(everything))
    st.close()
    return 0


def cmd_train_teacher(cfg, root, args):
    split = load_samples(root)
    st = Stage(root, "teacher", cfg)
    try:
        teacher, state = train_teacher(
            make_teacher_config(cfg), split["train"], split["val"], max_steps=cfg.teacher_max_steps,
            lr=cfg.teacher_lr, batch_size=cfg.teacher_batch_size, seed=cfg.seed, target=cfg.teacher_target,
            eval_every=cfg.teacher_eval_every,
        )
    except TeacherTrainingError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        st.close()
        return 1
    save_checkpoint(st.file("teacher.lvt"), teacher, {"val_accuracy": state["acc"], "steps": state["step"]})
    write_csv(st.file("eval.csv"), [{"step": s, "val_accuracy": a} for s, a in state["evals"]], ["step", "val_accuracy"])
    print(f"teacher val accuracy {state['acc']:.4f} after {state['step']} steps")
    st.close()
    return 0


def cmd_extract(cfg, root, args):
    split = load_samples(root)
    teacher = load_model(os.path.join(root, "teacher", "teacher.lvt"), "train-teacher")
    st = Stage(root, "extract", cfg)
    samples = split["train"] + split["val"] + split["test"]
    extract_supervision(teacher, samples, k=cfg.effective_topk, eps_norm=cfg.eps_norm)
    payload, rows = {}, []
    for s in samples:
        sup = s.supervision
        for name in ("gaze", "a_traj", "sparse_target", "v_sem"):
            payload[f"{s.sample_id}.{name}"] = getattr(sup, name).astype(np.float32)
        rows.append({"sample_id": s.sample_id, "focus": sup.focus, "degenerate": int(sup.degenerate)})
    write_container(st.file("payload.lvt"), payload)
    write_csv(st.file("trace.csv"), rows, ["sample_id", "focus", "degenerate"])
    st.close()
    return 0


def cmd_filter(cfg, root, args):
    split = load_samples(root)
    teacher = load_model(os.path.join(root, "teacher", "teacher.lvt"), "train-teacher")
    train = attach_supervision(root, split["train"])
    st = Stage(root, "filter", cfg)
    text_only = train_text_only(cfg, train)
    save_checkpoint(st.file("text_only.lvt"), text_only)
    report, kept = run_filter(train, teacher, text_only, cfg.focus_threshold)
    rows = []
    for bucket in ("wrong_answer", "too_easy", "misaligned", "retained"):
        rows += [{"sample_id": sid, "bucket": bucket, "flag": report.flags.get(sid, "")} for sid in getattr(report, bucket)]
    rows.sort(key=lambda r: r["sample_id"])
    write_csv(st.file("buckets.csv"), rows, ["sample_id", "bucket", "flag"])
    write_csv(st.file("counts.csv"), [report.counts()], ["wrong_answer", "too_easy", "misaligned", "retained"])
    with open(st.file("retained.txt"), "w", encoding="utf-8") as fh:
        fh.write("".join(s.sample_id + "\n" for s in kept))
    print("filter:", report.counts())
    st.close()
    return 0


def _student_inputs(root):
    split = load_samples(root)
    train = retained_samples(root, attach_supervision(root, split["train"]))
    if not train:
        raise MissingArtifact("filter/retained.txt lists no samples; relax focus_threshold and re-run `lvt filter`")
    teacher = load_model(os.path.join(root, "teacher", "teacher.lvt"), "train-teacher")
    teacher_gaze = model_gaze(teacher, split["test"], positions="answer")
    return split, train, teacher, teacher_gaze


def _train_and_report(cfg, stage, train, test, teacher_gaze, opts, k_latent, mask_eval=False):
    model = Model(make_student_config(cfg, k_latent=k_latent, seed=opts.seed))
    rows = train_student(model, train, opts)
    write_csv(stage.file("losses.csv"), rows, LOSS_COLUMNS)
    save_checkpoint(stage.file("student.lvt"), model)
    metrics = evaluate_student(model, test, teacher_gaze)
    if mask_eval:
        metrics["accuracy"] = metrics["accuracy_masked"]
    write_csv(stage.file("metrics.csv"), [metrics], METRIC_COLUMNS)
    return model, rows, metrics


def cmd_train_student(cfg, root, args):
    split, train, _, teacher_gaze = _student_inputs(root)
    name = args.name or ("naive" if args.naive else "distilled")
    st = Stage(root, os.path.join("students", name), cfg)
    if args.naive:
        opts, k = naive_options(cfg, cfg.seed), 0
    else:
        opts, k = student_options(cfg, cfg.seed), cfg.k_latent
    _, _, metrics = _train_and_report(cfg, st, train, split["test"], teacher_gaze, opts, k)
    print(f"student {name}: " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    st.close()
    return 0


def cmd_probe_gamma(cfg, root, args):
    split = load_samples(root)
    if args.name:
        model = load_model(os.path.join(root, "students", args.name, "student.lvt"), "train-student")
    else:
        model = load_model(os.path.join(root, "teacher", "teacher.lvt"), "train-teacher")
    st = Stage(root, "probe", cfg)
    batch = D.make_batch([s for s in split["test"] if not s.exempt_from_focus][: cfg.batch_size])
    rows = gradient_transition_probe(model, batch, PROBE_GAMMAS)
    columns = ["gamma", "grad_norm", "l_ntp", "grad_norm_total"]
    write_csv(st.file("probe.csv"), [dict(zip(columns, r)) for r in rows], columns)
    for g, n, l, t in rows:
        print(f"gamma={g:g} grad_norm={n:.6e} l_ntp={l:.4f} grad_norm_total={t:.6e}")
    st.close()
    return 0


def cmd_analyze(cfg, root, args):
    split = load_samples(root)
    name = args.name or "distilled"
    teacher = load_model(os.path.join(root, "teacher", "teacher.lvt"), "train-teacher")
    student = load_model(os.path.join(root, "students", name, "student.lvt"), "train-student")
    st = Stage(root, os.path.join("analysis", name), cfg)
    test = split["test"]
    report = perception_gap_report(teacher, student, test, k_salient=min(cfg.k_salient, cfg.n_patches))
    write_gap_report(st.path, report)
    rows, summary = accuracy_vs_focus_curve(teacher, test, [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0])
    write_focus_curve(st.path, rows, summary)
    ent = {
        "teacher": attention_entropy(renormalize(model_gaze(teacher, test, positions="answer"))),
        name: attention_entropy(renormalize(model_gaze(student, test, positions="generated"))),
    }
    write_entropy_histogram(st.file("entropy.svg"), ent, cfg.n_patches)
    for r in report.rows():
        print(r)
    st.close()
    return 0


def ablation_variants(cfg: RunConfig):
    """``{variant: (options, k_latent, evaluate_with_masked_latents)}``."""
    seed = cfg.seed
    return {
        "full": (student_options(cfg, seed), cfg.k_latent, False),
        "no_traj": (student_options(cfg, seed, use_traj=False), cfg.k_latent, False),
        "no_concept": (student_options(cfg, seed, use_concept=False), cfg.k_latent, False),
        "masked_latents": (student_options(cfg, seed), cfg.k_latent, True),
        "single_stage": (student_options(cfg, seed, single_stage=True), cfg.k_latent, False),
        "k4": (student_options(cfg, seed), 4, False),
        "k6": (student_options(cfg, seed), 6, False),
        "k8": (student_options(cfg, seed), 8, False),
    }


def cmd_ablate(cfg, root, args):
    split, train, _, teacher_gaze = _student_inputs(root)
    summary = []
    for variant, (opts, k, masked) in ablation_variants(cfg).items():
        vcfg = cfg.replace(k_latent=k, use_traj=opts.use_traj, use_concept=opts.use_concept,
                           single_stage=opts.single_stage, mask_latents=masked)
        st = Stage(root, os.path.join("ablate", variant), vcfg)
        _, _, metrics = _train_and_report(vcfg, st, train, split["test"], teacher_gaze, opts, k, mask_eval=masked)
        summary.append({"variant": variant, **metrics})
        log.info("ablation %s: %s", variant, metrics)
        st.close()
    write_csv(os.path.join(root, "ablate", "summary.csv"), summary, ["variant"] + METRIC_COLUMNS)
    for row in summary:
        print(row["variant"], " ".join(f"{k}={row[k]:.4f}" for k in METRIC_COLUMNS))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "extract": cmd_extract,
    "filter": cmd_filter,
    "train-student": cmd_train_student,
    "probe-gamma": cmd_probe_gamma,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="lvt", description="Latent visual-thought distillation toolkit")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--run-dir", help="run root (default: $LVT_RUN_DIR or ./runs)")
    p.add_argument("--name", help="student name (train-student, analyze, probe-gamma)")
    p.add_argument("--naive", action="store_true", help="train-student: plain fine-tuning baseline without latents")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    logging.getLogger("lvt").setLevel(logging.INFO)
    try:
        cfg = load_config(args.config, rest)
        return COMMANDS[args.command](cfg, run_root(args.run_dir), args)
    except (ConfigError, MissingArtifact, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
