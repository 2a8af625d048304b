"""End-to-end directional experiment: teacher, filtering, then latent-distilled
students against plain fine-tuned students over several seeds."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .analysis import attention_entropy, kl, renormalize
from .config import RunConfig
from .model import Model, student_config, teacher_config
from .pipeline import extract_supervision, model_gaze, run_filter
from .training import StudentOptions, accuracy, train_ntp, train_student, train_teacher

log = logging.getLogger(__name__)


def grid_config(cfg: RunConfig):
    return D.GridConfig(cfg.grid_rows, cfg.grid_cols, cfg.min_objects, cfg.max_objects, cfg.noise)


def make_corpus(cfg: RunConfig):
    """Deterministic train/val/test split for ``cfg.seed``."""
    n = cfg.n_train + cfg.n_val + cfg.n_test
    corpus = D.generate_corpus(cfg.seed, n, grid_config(cfg))
    return D.split_corpus(corpus, cfg.n_train, cfg.n_val, cfg.n_test)


def make_teacher_config(cfg: RunConfig):
    return teacher_config(
        d_model=cfg.teacher_d_model, n_layers=cfg.teacher_layers, n_heads=cfg.teacher_heads,
        d_teacher=cfg.teacher_d_model, vocab_size=len(D.VOCAB), patch_grid=(cfg.grid_rows, cfg.grid_cols),
        eoa_id=D.EOA, init_seed=cfg.seed,
    )


def make_student_config(cfg: RunConfig, *, k_latent=None, seed=None):
    return student_config(
        d_model=cfg.student_d_model, n_layers=cfg.student_layers, n_heads=cfg.student_heads,
        k_latent=cfg.k_latent if k_latent is None else k_latent, d_teacher=cfg.teacher_d_model,
        vocab_size=len(D.VOCAB), patch_grid=(cfg.grid_rows, cfg.grid_cols), eoa_id=D.EOA,
        gate_latent_path=cfg.gate_latent_path, init_seed=cfg.seed if seed is None else seed,
    )


def make_text_only_config(cfg: RunConfig):
    """Student-sized model that never sees image keys."""
    c = make_student_config(cfg, k_latent=0)
    c.mask_image = True
    c.freeze_patch_embedder = False
    return c


def train_text_only(cfg: RunConfig, train):
    model = Model(make_text_only_config(cfg))
    train_ntp(model, train, steps=cfg.text_only_steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)
    return model


def student_options(cfg: RunConfig, seed, **changes):
    opts = StudentOptions(
        total_steps=cfg.total_steps, warmup_steps=cfg.warmup_steps, gate_epsilon=cfg.gate_epsilon,
        lam=cfg.lam, lr=cfg.lr, batch_size=cfg.batch_size, single_stage=cfg.single_stage,
        use_concept=cfg.use_concept, use_traj=cfg.use_traj, seed=seed,
    )
    for k, v in changes.items():
        setattr(opts, k, v)
    return opts


def naive_options(cfg: RunConfig, seed):
    """Plain fine-tuning: no auxiliary terms, gate open from the first step."""
    return student_options(cfg, seed, lam=0.0, use_concept=False, use_traj=False, single_stage=True)


def trajectory_stats(teacher_gaze, student_gaze):
    """Per-sample KL(teacher || student) and student entropy on renormalised gaze."""
    t = renormalize(teacher_gaze)
    s = renormalize(student_gaze)
    return kl(t, s), attention_entropy(s)


def evaluate_student(model, samples, teacher_gaze):
    acc, _ = accuracy(model, samples)
    masked, _ = accuracy(model, samples, mask_latents=True)
    gaze = model_gaze(model, samples, positions="generated")
    traj_kl, entropy = trajectory_stats(teacher_gaze, gaze)
    return {
        "accuracy": acc,
        "accuracy_masked": masked,
        "mask_drop": acc - masked,
        "trajectory_kl": float(np.mean(traj_kl)),
        "entropy": float(np.mean(entropy)),
    }


@dataclass
class ExperimentResult:
    teacher: dict
    filter_counts: dict
    seeds: list = field(default_factory=list)  # per seed: {"seed", "distilled": {...}, "naive": {...}}
    timings: dict = field(default_factory=dict)
    # trained models and the test split, kept for follow-up probes; not part of the metrics
    models: dict = field(default_factory=dict, repr=False, compare=False)

    def checks(self):
        """Per seed: (kl_lower, mask_effect, entropy_lower) booleans."""
        out = []
        for row in self.seeds:
            lv, nv = row["distilled"], row["naive"]
            out.append({
                "seed": row["seed"],
                "trajectory_kl": lv["trajectory_kl"] < nv["trajectory_kl"],
                "latent_masking": lv["mask_drop"] >= 0.05 and abs(nv["mask_drop"]) < 0.02,
                "entropy": lv["entropy"] < nv["entropy"],
            })
        return out

    def passed(self, need=2):
        checks = self.checks()
        return {k: sum(c[k] for c in checks) >= need for k in ("trajectory_kl", "latent_masking", "entropy")}

    def metrics(self):
        """Flat ``{name: value}`` of every reported number (timings excluded)."""
        flat = {f"teacher.{k}": v for k, v in self.teacher.items()}
        flat.update({f"filter.{k}": v for k, v in self.filter_counts.items()})
        for row in self.seeds:
            for model in ("distilled", "naive"):
                flat.update({f"seed{row['seed']}.{model}.{k}": v for k, v in row[model].items()})
        return flat


def run_directional_experiment(cfg: RunConfig, seeds=(0, 1, 2)):
    """Teacher -> text-only baseline -> extract -> filter -> paired students per seed."""
    clock = {}
    t0 = time.perf_counter()
    train, val, test = make_corpus(cfg)
    teacher, state = train_teacher(
        make_teacher_config(cfg), train, val, max_steps=cfg.teacher_max_steps, lr=cfg.teacher_lr,
        batch_size=cfg.teacher_batch_size, seed=cfg.seed, target=cfg.teacher_target, eval_every=cfg.teacher_eval_every,
    )
    clock["teacher"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    text_only = train_text_only(cfg, train)
    extract_supervision(teacher, train, k=cfg.effective_topk, eps_norm=cfg.eps_norm)
    report, retained = run_filter(train, teacher, text_only, cfg.focus_threshold)
    if not retained:
        raise RuntimeError("filtering retained no samples")
    teacher_gaze = model_gaze(teacher, test, positions="answer")
    clock["filter"] = time.perf_counter() - t1
    log.info("filter counts %s", report.counts())
    result = ExperimentResult(
        teacher={"val_accuracy": state["acc"], "steps": state["step"]},
        filter_counts=report.counts(),
    )
    result.models.update(teacher=teacher, test=test)
    for seed in seeds:
        t2 = time.perf_counter()
        distilled = Model(make_student_config(cfg, seed=seed))
        train_student(distilled, retained, student_options(cfg, seed))
        naive = Model(make_student_config(cfg, k_latent=0, seed=seed))
        train_student(naive, retained, naive_options(cfg, seed))
        row = {
            "seed": seed,
            "distilled": evaluate_student(distilled, test, teacher_gaze),
            "naive": evaluate_student(naive, test, teacher_gaze),
        }
        result.seeds.append(row)
        result.models[f"seed{seed}"] = {"distilled": distilled, "naive": naive}
        clock[f"seed{seed}"] = time.perf_counter() - t2
        log.info("seed %d distilled %s naive %s", seed, row["distilled"], row["naive"])
    clock["total"] = time.perf_counter() - t0
    result.timings = clock
    return result
