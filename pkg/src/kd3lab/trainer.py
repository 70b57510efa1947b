"""Distillation loop, ablation variants, soft-label KD baseline, evaluation, gradient checks."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .alignment import alignment_weight, wfa_loss
from .datagen import LabeledSet
from .mixdist import MixParams, mdcl_combined, mdcl_loss_one_side, perturb_batch
from .model import (
    ArchConfig,
    Network,
    ProjectionHead,
    Role,
    accuracy,
    cross_entropy,
    extractor_backward,
    extractor_forward,
    head_backward,
    head_forward,
    init_classifier,
    init_network,
    logits_from_features,
)
from .numerics import Rng, log_softmax, softmax
from .optim import OptimConfig, Optimizer, lr_at
from .selection import ScheduleState, SelectionOutcome, select_instances, selection_quality

log = logging.getLogger(__name__)

VARIANTS = (
    "Full",
    "NoClassifierSharingOneHot",
    "NoClassifierSharingSoft",
    "RandomSelection",
    "StudentOnlySelection",
    "TeacherOnlySelection",
    "NoMDCL",
    "NoMixDistribution",
    "KDBaselineOnPool",
)

# jump-separated RNG streams per concern, so variants share draws where they can
_S_INIT, _S_SHUFFLE, _S_MIX, _S_RANDSEL, _S_NOISE = 20, 21, 22, 23, 24


class FrozenClassifierViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    optim: OptimConfig = field(default_factory=OptimConfig)
    alpha_tradeoff: float = 0.01
    tau: float = 0.30
    v_th: float = 0.95
    mix: MixParams = field(default_factory=MixParams)
    include_positive_in_denominator: bool = False
    student_hidden: tuple = (64, 64)
    embed_dim: int = 32
    kd_lambda: float = 1.0
    kd_temperature: float = 4.0
    seed: int = 0
    variant: str = "Full"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha_tradeoff < 0:
            raise ValueError("alpha_tradeoff must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0 < self.v_th <= 1:
            raise ValueError("V_th must be in (0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.kd_temperature <= 0 or self.kd_lambda < 0:
            raise ValueError("kd_temperature must be > 0 and kd_lambda >= 0")
        self.optim.validate()
        self.mix.validate()

    def snapshot(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    alpha_t: float
    skipped: bool
    selected: int
    precision: float
    recall: float
    l_wfa: float
    l_mdcl: float
    l_mdcl_student: float
    l_mdcl_teacher: float
    l_cls: float
    combined: float
    perturb_magnitude: float
    test_accuracy: float


@dataclass
class RunRecord:
    config: dict
    seed: int
    variant: str
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # [epoch, l_wfa, l_mdcl, l_cls, combined]
    final_test_accuracy: float = float("nan")
    skipped_epochs: int = 0
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "config": self.config,
            "seed": self.seed,
            "variant": self.variant,
            "final_test_accuracy": self.final_test_accuracy,
            "skipped_epochs": self.skipped_epochs,
            "epochs": [asdict(e) for e in self.epochs],
            "steps": self.steps,
        }
        if include_timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=1) + "\n"

    def write_csv(self, path) -> None:
        names = [f.name for f in fields(EpochRecord)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for e in self.epochs:
                w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(e, n) for n in names)])


def total_loss(l_wfa: float, l_mdcl: float, alpha_tradeoff: float) -> float:
    return l_wfa + alpha_tradeoff * l_mdcl


def evaluate(net: Network, test: LabeledSet) -> float:
    """Fraction of argmax-correct predictions (lowest index wins ties)."""
    return accuracy(net, test)


# ---------------------------------------------------------------------------
# one minibatch of the distillation objective
# ---------------------------------------------------------------------------


@dataclass
class BatchResult:
    l_wfa: float
    l_mdcl: float
    l_mdcl_student: float
    l_mdcl_teacher: float
    l_cls: float
    combined: float
    grads: dict


def _add(grads: dict, prefix: str, new: dict) -> None:
    for k, v in new.items():
        key = prefix + k
        grads[key] = grads[key] + v if key in grads else v


def _own_classifier_loss(student: Network, h_s, dlog_acc, p_t, mode: str, temperature: float):
    """Targets from the teacher for a non-shared classifier: 'onehot' (CE) or 'soft' (T^2 KL)."""
    n = h_s.shape[0]
    logits = logits_from_features(student, h_s)
    if mode == "onehot":
        y = np.argmax(p_t, axis=1)
        lp = log_softmax(logits, axis=1)
        loss = -float(np.mean(lp[np.arange(n), y]))
        d = np.exp(lp)
        d[np.arange(n), y] -= 1.0
        d /= n
    else:
        T = temperature
        # teacher probabilities softened by re-tempering their log
        q = softmax(np.log(np.clip(p_t, 1e-300, None)) / T, axis=1)
        lp = log_softmax(logits / T, axis=1)
        loss = float(T * T * np.mean(np.sum(q * (np.log(np.clip(q, 1e-300, None)) - lp), axis=1)))
        d = T * (np.exp(lp) - q) / n
    dlog_acc += d
    return loss


def kd3_batch(
    teacher: Network,
    teacher_head: ProjectionHead,
    student: Network,
    x: np.ndarray,
    xhat: np.ndarray,
    cfg: TrainConfig,
    own_classifier: str | None = None,
    weights: np.ndarray | None = None,
    grad_terms: tuple = ("wfa", "mdcl", "cls"),
) -> BatchResult:
    """Loss terms and parameter gradients for one minibatch.

    Gradient keys: ``S.*`` for student parameters, ``T.head.*`` for the teacher
    projection head.  The teacher extractor and the shared classifier never get
    a gradient.  ``weights`` overrides the alignment weights (gradient checks
    hold them fixed); ``grad_terms`` limits which losses contribute gradients.
    """
    n = x.shape[0]
    grads: dict = {}
    h_t, _ = extractor_forward(teacher.extractor, x)
    p_t = softmax(logits_from_features(teacher, h_t), axis=1)
    h_s, acts_s = extractor_forward(student.extractor, x)
    p_s = softmax(logits_from_features(student, h_s), axis=1)
    w = alignment_weight(p_s, p_t) if weights is None else weights
    l_wfa, dh_s = wfa_loss(h_s, h_t, w)
    if "wfa" not in grad_terms:
        dh_s = np.zeros_like(dh_s)

    l_cls = 0.0
    if own_classifier is not None:
        dlog = np.zeros((n, student.num_classes))
        l_cls = _own_classifier_loss(student, h_s, dlog, p_t, own_classifier, cfg.kd_temperature)
        if "cls" in grad_terms:
            dh_s = dh_s + dlog @ student.classifier.weight
            grads["S.cls.W"] = dlog.T @ h_s
            grads["S.cls.b"] = dlog.sum(axis=0)

    l_md = l_md_s = l_md_t = 0.0
    dh_s_hat = None
    acts_s_hat = None
    if n >= 2:
        h_t_hat, _ = extractor_forward(teacher.extractor, xhat)
        h_s_hat, acts_s_hat = extractor_forward(student.extractor, xhat)
        zb_t, ub_t = head_forward(teacher_head, h_t)
        zh_t, uh_t = head_forward(teacher_head, h_t_hat)
        zb_s, ub_s = head_forward(student.head, h_s)
        zh_s, uh_s = head_forward(student.head, h_s_hat)
        res = mdcl_combined((zb_t, zh_t), (zb_s, zh_s), cfg.tau, cfg.include_positive_in_denominator)
        l_md, l_md_s, l_md_t = res.loss, res.loss_student, res.loss_teacher
        a = cfg.alpha_tradeoff
        if a > 0 and "mdcl" in grad_terms:
            g1, dh1 = head_backward(student.head, h_s, ub_s, zb_s, a * res.grad_student[0])
            g2, dh2 = head_backward(student.head, h_s_hat, uh_s, zh_s, a * res.grad_student[1])
            _add(grads, "S.", g1)
            _add(grads, "S.", g2)
            dh_s = dh_s + dh1
            dh_s_hat = dh2
            t1, _ = head_backward(teacher_head, h_t, ub_t, zb_t, a * res.grad_teacher[0])
            t2, _ = head_backward(teacher_head, h_t_hat, uh_t, zh_t, a * res.grad_teacher[1])
            _add(grads, "T.", t1)
            _add(grads, "T.", t2)

    _add(grads, "S.", extractor_backward(student.extractor, acts_s, dh_s))
    if dh_s_hat is not None:
        _add(grads, "S.", extractor_backward(student.extractor, acts_s_hat, dh_s_hat))
    combined = total_loss(l_wfa, l_md, cfg.alpha_tradeoff) + l_cls
    return BatchResult(l_wfa, l_md, l_md_s, l_md_t, l_cls, combined, grads)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _check_compat(teacher: Network, data: LabeledSet) -> None:
    if data.dim != teacher.extractor.input_dim:
        raise ValueError(f"data width {data.dim} != teacher input {teacher.extractor.input_dim}")
    if data.num_classes != teacher.num_classes:
        raise ValueError(f"data has {data.num_classes} classes, teacher has {teacher.num_classes}")


def _base_seed(cfg: TrainConfig, rng: Rng | None) -> int:
    return cfg.seed if rng is None or rng.seed < 0 else rng.seed


def _student_arch(teacher: Network, cfg: TrainConfig) -> ArchConfig:
    return ArchConfig(
        input_dim=teacher.extractor.input_dim,
        hidden=tuple(cfg.student_hidden),
        feature_dim=teacher.extractor.feature_dim,
        num_classes=teacher.num_classes,
        embed_dim=cfg.embed_dim,
    )


def distill(teacher: Network, pool: LabeledSet, test: LabeledSet, cfg: TrainConfig, rng: Rng | None = None):
    """Train a student from a frozen teacher on the dynamically selected pool.

    Handles every variant except ``KDBaselineOnPool`` (see :func:`kd_baseline`).
    Returns ``(student, RunRecord)``.
    """
    cfg.validate()
    if cfg.variant == "KDBaselineOnPool":
        return kd_baseline(teacher, pool, test, cfg, rng, use_labels=False)
    if not teacher.classifier.frozen:
        raise ValueError("teacher classifier must be frozen before distillation")
    _check_compat(teacher, pool)
    _check_compat(teacher, test)
    seed = _base_seed(cfg, rng)
    init_rng = Rng(seed, _S_INIT)
    shuffle_rng = Rng(seed, _S_SHUFFLE)
    mix_rng = Rng(seed, _S_MIX)
    randsel_rng = Rng(seed, _S_RANDSEL)
    noise_rng = Rng(seed, _S_NOISE)

    variant = cfg.variant
    sharing = not variant.startswith("NoClassifierSharing")
    own_mode = None if sharing else ("onehot" if variant.endswith("OneHot") else "soft")
    alpha_override = {"StudentOnlySelection": 1.0, "TeacherOnlySelection": 0.0}.get(variant)

    arch = _student_arch(teacher, cfg)
    student = init_network(arch, init_rng, Role.Student, classifier=teacher.classifier if sharing else None)
    teacher_head = ProjectionHead(teacher.head.weight.copy(), teacher.head.bias.copy())

    params = {f"S.{k}": v for k, v in student.params().items()}
    params["T.head.W"] = teacher_head.weight
    params["T.head.b"] = teacher_head.bias
    opt = Optimizer(params, cfg.optim)

    cls_ref = (teacher.classifier.weight.copy(), teacher.classifier.bias.copy())
    record = RunRecord(cfg.snapshot(), seed, variant)
    t0 = time.perf_counter()

    for t in range(cfg.epochs):
        lr = lr_at(cfg.optim, t, cfg.epochs)
        state = ScheduleState(t, cfg.epochs)
        outcome = select_instances(pool, teacher, student, state, cfg.v_th, alpha_override)
        chosen = outcome.selected
        if variant == "RandomSelection":
            chosen = np.sort(randsel_rng.choice(len(pool), chosen.size))
            outcome = SelectionOutcome(
                outcome.y_pred, outcome.confidence, outcome.class_counts, outcome.thresholds, chosen, outcome.alpha
            )
        q = selection_quality(outcome, pool) if pool.provenance is not None else None

        sums = dict(l_wfa=0.0, l_mdcl=0.0, l_mdcl_student=0.0, l_mdcl_teacher=0.0, l_cls=0.0, combined=0.0)
        mag_sum, mag_n, nb = 0.0, 0, 0
        skipped = chosen.size == 0
        if skipped:
            record.skipped_epochs += 1
            log.warning("epoch %d: empty selection, epoch skipped", t)
        else:
            order = chosen[shuffle_rng.permutation(chosen.size)]
            for s in range(0, order.size, cfg.batch_size):
                x = pool.x[order[s : s + cfg.batch_size]]
                pb = perturb_batch(x, cfg.mix, mix_rng)
                xhat = pb.xhat
                mag = float(np.mean(np.abs(pb.xhat - x)))
                if variant == "NoMixDistribution":
                    xhat = x + mag * noise_rng.normal(size=x.shape)
                mag_sum += mag * x.shape[0]
                mag_n += x.shape[0]
                br = kd3_batch(teacher, teacher_head, student, x, xhat, cfg, own_mode)
                opt.step(br.grads, lr)
                for k in sums:
                    sums[k] += getattr(br, k)
                record.steps.append([t, br.l_wfa, br.l_mdcl, br.l_cls, br.combined])
                nb += 1

        if sharing and (
            student.classifier is not teacher.classifier
            or not np.array_equal(teacher.classifier.weight, cls_ref[0])
            or not np.array_equal(teacher.classifier.bias, cls_ref[1])
        ):
            raise FrozenClassifierViolation(f"shared classifier changed during epoch {t}")

        acc = evaluate(student, test)
        record.epochs.append(
            EpochRecord(
                epoch=t,
                lr=lr,
                alpha_t=outcome.alpha,
                skipped=skipped,
                selected=int(chosen.size),
                precision=q.precision if q else float("nan"),
                recall=q.recall if q else float("nan"),
                **{k: v / nb if nb else 0.0 for k, v in sums.items()},
                perturb_magnitude=mag_sum / mag_n if mag_n else 0.0,
                test_accuracy=acc,
            )
        )
        log.info("epoch %d sel=%d acc=%.4f loss=%.5f", t, chosen.size, acc, record.epochs[-1].combined)

    record.final_test_accuracy = record.epochs[-1].test_accuracy
    record.wall_clock_s = time.perf_counter() - t0
    student.meta["teacher_head"] = teacher_head
    return student, record


def run_ablation(variant: str, teacher: Network, pool: LabeledSet, test: LabeledSet, cfg: TrainConfig, rng: Rng | None = None):
    """The full pipeline with exactly one component swapped out."""
    if variant == "Full":
        raise ValueError("run_ablation needs a non-Full variant; use distill for Full")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    c = TrainConfig(**{f.name: getattr(cfg, f.name) for f in fields(TrainConfig)})
    c.variant = variant
    if variant == "NoMDCL":
        c.alpha_tradeoff = 0.0
    return distill(teacher, pool, test, c, rng)


def kd_loss(student: Network, teacher: Network, x, y, kd_lambda: float, temperature: float):
    """Mean over the batch of CE(student, y) + lambda * T^2 * KL(teacher_T || student_T)."""
    n = x.shape[0]
    h_s, acts = extractor_forward(student.extractor, x)
    logits = logits_from_features(student, h_s)
    lp = log_softmax(logits, axis=1)
    ce = -float(np.mean(lp[np.arange(n), y]))
    dlog = np.exp(lp)
    dlog[np.arange(n), y] -= 1.0
    dlog /= n
    kt = 0.0
    if kd_lambda > 0:
        T = temperature
        lt = log_softmax(logits_from_features(teacher, extractor_forward(teacher.extractor, x)[0]) / T, axis=1)
        ls = log_softmax(logits / T, axis=1)
        q = np.exp(lt)
        kt = float(T * T * np.mean(np.sum(q * (lt - ls), axis=1)))
        dlog = dlog + kd_lambda * T * (np.exp(ls) - q) / n
    grads = extractor_backward(student.extractor, acts, dlog @ student.classifier.weight)
    grads["cls.W"] = dlog.T @ h_s
    grads["cls.b"] = dlog.sum(axis=0)
    return ce + kd_lambda * kt, ce, kt, grads


def kd_baseline(
    teacher: Network,
    data: LabeledSet,
    test: LabeledSet,
    cfg: TrainConfig,
    rng: Rng | None = None,
    use_labels: bool | None = None,
):
    """Soft-label KD with the student's own trainable classifier (no selection, no sharing).

    Hard labels come from ``data.labels`` when ``use_labels`` (default: labels
    present and the set carries no provenance), else from the teacher's argmax.
    """
    cfg.validate()
    _check_compat(teacher, data)
    _check_compat(teacher, test)
    if use_labels is None:
        use_labels = data.labels is not None and data.provenance is None
    if use_labels and data.labels is None:
        raise ValueError("use_labels requested but data is unlabeled")
    seed = _base_seed(cfg, rng)
    init_rng, shuffle_rng = Rng(seed, _S_INIT), Rng(seed, _S_SHUFFLE)
    arch = _student_arch(teacher, cfg)
    student = init_network(arch, init_rng, Role.Student)
    y_all = data.labels if use_labels else np.argmax(
        logits_from_features(teacher, extractor_forward(teacher.extractor, data.x)[0]), axis=1
    )
    opt = Optimizer(student.params(head=False), cfg.optim)
    record = RunRecord(cfg.snapshot(), seed, "KDBaselineOnPool" if not use_labels else "KDBaseline")
    t0 = time.perf_counter()
    n = len(data)
    for t in range(cfg.epochs):
        lr = lr_at(cfg.optim, t, cfg.epochs)
        order = shuffle_rng.permutation(n)
        tot_ce = tot_kt = tot = 0.0
        nb = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, ce, kt, grads = kd_loss(student, teacher, data.x[idx], y_all[idx], cfg.kd_lambda, cfg.kd_temperature)
            opt.step(grads, lr)
            tot, tot_ce, tot_kt, nb = tot + loss, tot_ce + ce, tot_kt + kt, nb + 1
            record.steps.append([t, 0.0, 0.0, loss, loss])
        acc = evaluate(student, test)
        record.epochs.append(
            EpochRecord(t, lr, 0.0, False, n, float("nan"), float("nan"), 0.0, 0.0, 0.0, 0.0,
                        tot / max(nb, 1), tot / max(nb, 1), 0.0, acc)
        )
    record.final_test_accuracy = record.epochs[-1].test_accuracy
    record.wall_clock_s = time.perf_counter() - t0
    return student, record


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

LOSS_KINDS = (
    "cross_entropy", "kd", "wfa", "mdcl_one_side", "mdcl_combined", "objective", "objective_onehot", "objective_soft",
)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both norms are below ``floor``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if max(na, nb) < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / max(na, nb))


def numeric_grad(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        fp = f()
        arr[i] = old - step
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def _jittered(net: Network, rng: Rng) -> Network:
    # zero biases put pre-activations exactly on the ReLU kink whenever a whole
    # layer is dead for a row; finite differences are meaningless there
    for b in net.extractor.biases + [net.classifier.bias, net.head.bias]:
        b[:] = rng.normal(0, 0.3, size=b.shape)
    return net


def _small_pair(rng: Rng, d: int, d_f: int, d_e: int, k: int):
    t_arch = ArchConfig(d, (int(rng.uniform(3, 7)),), d_f, k, d_e)
    s_arch = ArchConfig(d, (int(rng.uniform(3, 7)),), d_f, k, d_e)
    teacher = init_network(t_arch, rng, Role.Teacher)
    for w in teacher.extractor.biases + [teacher.classifier.bias, teacher.head.bias]:
        w[:] = rng.normal(0, 0.3, size=w.shape)
    teacher.classifier.freeze()
    student = init_network(s_arch, rng, Role.Student, classifier=teacher.classifier)
    for w in student.extractor.biases + [student.head.bias]:
        w[:] = rng.normal(0, 0.3, size=w.shape)
    return teacher, student


def gradient_check(kind: str, rng: Rng, d: int = 6, d_f: int = 5, d_e: int = 4, k: int = 3, batch: int = 4,
                   step: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Alignment weights and perturbed inputs are held fixed at their base-point
    values, matching how they enter the training step.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    worst = 0.0
    if kind == "mdcl_one_side":
        zb = rng.normal(size=(batch, d_e))
        zh = rng.normal(size=(batch, d_e))
        tau = rng.uniform(0.2, 1.0)
        _, gb, gh = mdcl_loss_one_side(zb, zh, tau)
        for arr, g in ((zb, gb), (zh, gh)):
            worst = max(worst, rel_error(g, numeric_grad(lambda: mdcl_loss_one_side(zb, zh, tau)[0], arr, step)))
        return worst

    teacher, student = _small_pair(rng, d, d_f, d_e, k)
    x = rng.normal(size=(batch, d))
    y = np.array([int(v) for v in rng.uniform(0, k, size=batch)])

    if kind == "cross_entropy":
        net = _jittered(init_network(ArchConfig(d, (6,), d_f, k, d_e), rng), rng)
        f = lambda: cross_entropy(net, x, y)[0]  # noqa: E731
        _, grads = cross_entropy(net, x, y)
        params = net.params(head=False)
    elif kind == "kd":
        net = _jittered(init_network(ArchConfig(d, (6,), d_f, k, d_e), rng), rng)
        f = lambda: kd_loss(net, teacher, x, y, 0.7, 2.0)[0]  # noqa: E731
        grads = kd_loss(net, teacher, x, y, 0.7, 2.0)[3]
        params = net.params(head=False)
    else:
        own = {"objective_onehot": "onehot", "objective_soft": "soft"}.get(kind)
        if own is not None:
            student.classifier = init_classifier(d_f, k, rng)
            kind = "objective"
        cfg = TrainConfig(alpha_tradeoff=1.0 if kind != "objective" else 0.37, tau=rng.uniform(0.2, 1.0),
                          kd_temperature=2.5)
        only = {"wfa": ("wfa",), "mdcl_combined": ("mdcl",), "objective": ("wfa", "mdcl", "cls")}[kind]
        head_t = ProjectionHead(teacher.head.weight.copy(), teacher.head.bias.copy())
        xhat = perturb_batch(x, MixParams(), rng).xhat
        h_t = extractor_forward(teacher.extractor, x)[0]
        h_s = extractor_forward(student.extractor, x)[0]
        w = alignment_weight(
            softmax(logits_from_features(student, h_s), axis=1), softmax(logits_from_features(teacher, h_t), axis=1)
        )

        def terms():
            br = kd3_batch(teacher, head_t, student, x, xhat, cfg, own, weights=w, grad_terms=only)
            return {"wfa": br.l_wfa, "mdcl_combined": br.l_mdcl, "objective": br.combined}[kind], br

        f = lambda: terms()[0]  # noqa: E731
        grads = terms()[1].grads
        if kind == "wfa":
            grads = {k_: v for k_, v in grads.items() if k_.startswith("S.ext")}
        params = {f"S.{k_}": v for k_, v in student.params().items()}
        if kind != "wfa":
            params["T.head.W"], params["T.head.b"] = head_t.weight, head_t.bias
        else:
            params = {k_: v for k_, v in params.items() if k_.startswith("S.ext")}
    for name, arr in params.items():
        worst = max(worst, rel_error(grads[name], numeric_grad(f, arr, step)))
    return worst
