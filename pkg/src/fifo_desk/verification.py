"""Gradient-check battery.

Every tensor primitive, every loss and the full segmentation objectives on
a micro network are compared against central differences. A case passes
when its maximum relative error stays below TOLERANCE.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass

import numpy as np

from fifo_desk.errors import GradCheckError, VerificationFailed
from fifo_desk.fifo_types import Domain
from fifo_desk.fogpass import (
    FogFactor,
    FogPassFilter,
    content_filter_loss,
    filter_loss,
    gram,
    gram_vector,
    gram_vector_length,
)
from fifo_desk.losses import (
    LossWeights,
    StylePair,
    consistency_loss,
    fsm_loss,
    objective_cw_sf,
    objective_d_rf,
    seg_ce,
)
from fifo_desk.segnet import ForwardResult, SegNetwork, build_network
from fifo_desk.tensorcore import ops
from fifo_desk.tensorcore.gradcheck import grad_check
from fifo_desk.tensorcore.tensor import Tape, Tensor, frozen

logger = logging.getLogger(__name__)

Resample = Callable[[np.random.Generator], None]

TOLERANCE = 1e-5
EPSILON = 1e-5
SAMPLES = 50
MARGIN = 0.1
# Battery weights; the training defaults would drown the style terms in cross-entropy.
WEIGHTS = LossWeights(lambda_fsm=1.0, lambda_con=0.1, margin=MARGIN)


@dataclass(frozen=True)
class Scale:
    name: str
    image_size: int
    width_base: int
    num_classes: int
    factor_dim: int


SCALES = {
    "micro": Scale("micro", image_size=8, width_base=8, num_classes=4, factor_dim=8),
    "small": Scale("small", image_size=16, width_base=8, num_classes=6, factor_dim=16),
}


@dataclass
class GradCase:
    """One battery case: a scalar loss of some parameter tensors."""

    name: str
    group: str
    loss_fn: Callable[[], Tensor]
    params: list[Tensor]
    resample: Resample | None = None


@dataclass
class CaseResult:
    name: str
    group: str
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _param(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _redraw(*tensors: Tensor, low: float = -1.0, high: float = 1.0) -> Resample:
    def resample(rng: np.random.Generator) -> None:
        for t in tensors:
            t.data[...] = rng.uniform(low, high, size=t.shape)

    return resample


def primitive_cases(rng: np.random.Generator) -> Iterator[GradCase]:
    """One case per differentiable primitive."""

    def case(
        name: str,
        op: Callable[[], Tensor],
        params: list[Tensor],
        resample: Resample | None = None,
    ) -> GradCase:
        weights = Tensor(rng.uniform(0.5, 1.5, size=op().shape))
        return GradCase(name, "primitive", lambda: ops.sum(op() * weights), params, resample)

    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    row = _param(rng, 4)
    yield case("add", lambda: ops.add(a, row), [a, row])
    yield case("sub", lambda: ops.sub(a, b), [a, b])
    yield case("mul", lambda: ops.mul(a, b), [a, b])
    denominator = _param(rng, 3, 4, low=0.5, high=2.0)
    yield case("div", lambda: ops.div(a, denominator), [a, denominator])
    yield case("scale", lambda: ops.scale(a, -2.5), [a])
    yield case("square", lambda: ops.square(a), [a])
    positive = _param(rng, 3, 4, low=0.5, high=2.0)
    yield case("sqrt", lambda: ops.sqrt(positive), [positive])
    yield case("log", lambda: ops.log(positive), [positive])
    yield case("exp", lambda: ops.exp(a), [a])
    kinked = _param(rng, 5, 6)
    yield case("leaky_relu", lambda: ops.leaky_relu(kinked, 0.01), [kinked], _redraw(kinked))
    hinged = _param(rng, 5, 6)
    yield case("clamp_min", lambda: ops.clamp_min(hinged, 0.1), [hinged], _redraw(hinged))
    m = _param(rng, 4, 5)
    yield case("matmul", lambda: ops.matmul(a, m), [a, m])
    u, v = _param(rng, 6), _param(rng, 6)
    yield case("dot", lambda: ops.dot(u, v), [u, v])
    yield case("l2_norm", lambda: ops.l2_norm(a, axis=1, keepdims=True), [a])
    yield case("sum", lambda: ops.sum(a, axis=0), [a])
    yield case("mean", lambda: ops.mean(a, axis=1), [a])
    yield case("softmax", lambda: ops.softmax(a, axis=-1), [a])
    yield case("reshape", lambda: ops.reshape(a, (2, 6)), [a])
    cube = _param(rng, 2, 3, 4)
    yield case("transpose", lambda: ops.transpose(cube, (2, 0, 1)), [cube])
    yield case("concat", lambda: ops.concat([a, b], axis=1), [a, b])
    yield case("take", lambda: ops.take(a, [0, 5, 5, 11]), [a])
    fmap = _param(rng, 2, 6, 6)
    kernel = _param(rng, 3, 2, 3, 3)
    bias = _param(rng, 3)
    yield case("conv2d", lambda: ops.conv2d(fmap, kernel, bias, 1, 1), [fmap, kernel, bias])
    yield case(
        "conv2d_stride2", lambda: ops.conv2d(fmap, kernel, bias, 2, 1), [fmap, kernel, bias]
    )
    yield case("upsample2x", lambda: ops.upsample2x(cube), [cube])
    yield case("gram", lambda: gram(fmap), [fmap])


def _factors(
    rng: np.random.Generator, domains: list[Domain], dim: int, pair_ids: list[int] | None = None
) -> tuple[list[Tensor], Callable[[], list[FogFactor]]]:
    values = [_param(rng, dim) for _ in domains]
    ids = pair_ids or [None] * len(domains)

    def build() -> list[FogFactor]:
        return [FogFactor(v, d, "C1", p) for v, d, p in zip(values, domains, ids, strict=True)]

    return values, build


def loss_cases(rng: np.random.Generator) -> Iterator[GradCase]:
    """One case per loss: cross-entropy, style matching, consistency, both filter losses."""
    h, w, c = 4, 5, 3
    logits = _param(rng, h, w, c, low=-2.0, high=2.0)
    labels = rng.integers(0, c, size=(h, w)).astype(np.uint8)
    labels[0, 0] = 255
    yield GradCase(
        "seg_ce", "loss", lambda: seg_ce(ops.softmax(logits, axis=-1), labels), [logits]
    )

    f_a, f_b = _param(rng, 6), _param(rng, 6)
    yield GradCase("fsm_loss", "loss", lambda: fsm_loss(f_a, f_b, 6, 3), [f_a, f_b])

    logits_sf = _param(rng, h, w, c, low=-2.0, high=2.0)
    yield GradCase(
        "consistency_loss",
        "loss",
        lambda: consistency_loss(ops.softmax(logits, axis=-1), ops.softmax(logits_sf, axis=-1)),
        [logits, logits_sf],
    )

    domains = [Domain.CW, Domain.CW, Domain.SF, Domain.RF]
    fog_values, fog_build = _factors(rng, domains, 5)
    yield GradCase(
        "filter_loss",
        "loss",
        lambda: filter_loss(fog_build(), MARGIN),
        fog_values,
        _redraw(*fog_values),
    )

    domains = [Domain.CW, Domain.SF, Domain.CW, Domain.SF, Domain.RF]
    content_values, content_build = _factors(rng, domains, 5, [0, 0, 1, 1, 2])
    yield GradCase(
        "content_filter_loss",
        "loss",
        lambda: content_filter_loss(content_build(), MARGIN),
        content_values,
        _redraw(*content_values),
    )

    fmap = _param(rng, 3, 4, 4)
    weights = Tensor(rng.uniform(0.5, 1.5, size=gram_vector_length(3)))
    yield GradCase(
        "gram_vector", "loss", lambda: ops.sum(gram_vector(fmap).values * weights), [fmap]
    )

    fog_filter = FogPassFilter.build(int(rng.integers(2**31)), "C1", 6, 4)
    u = Tensor(rng.uniform(-1.0, 1.0, size=6))
    yield GradCase(
        "fog_factor_norm",
        "loss",
        lambda: ops.sum(ops.square(fog_filter(u))),
        fog_filter.parameters(),
        _redraw(u),
    )


@dataclass
class _MicroSetup:
    net: SegNetwork
    filters: dict[str, FogPassFilter]
    images: dict[Domain, Tensor]
    labels: np.ndarray


def _micro_setup(scale: Scale, rng: np.random.Generator) -> _MicroSetup:
    net = build_network(
        int(rng.integers(2**31)), scale.num_classes, scale.width_base, ["C1", "R1"]
    )
    for p in net.parameters():
        if p.name and p.name.endswith(".bias"):
            p.data[...] = rng.uniform(-0.1, 0.1, size=p.shape)
    filters = {
        tap: FogPassFilter.build(
            int(rng.integers(2**31)),
            tap,
            gram_vector_length(net.tap_channels(tap)),
            scale.factor_dim,
        )
        for tap in net.tap_layers
    }
    size = scale.image_size
    images = {d: Tensor(rng.uniform(0.0, 1.0, size=(size, size, 3))) for d in Domain}
    labels = rng.integers(0, scale.num_classes, size=(size, size)).astype(np.uint8)
    return _MicroSetup(net, filters, images, labels)


def _style_pairs(
    setup: _MicroSetup, clearer: ForwardResult, foggier: ForwardResult
) -> list[StylePair]:
    pairs = []
    for tap, fog_filter in setup.filters.items():
        first = fog_filter(gram_vector(clearer.taps[tap], tap).values)
        second = fog_filter(gram_vector(foggier.taps[tap], tap).values)
        pairs.append(StylePair(tap, first, second, clearer.spatial_size(tap)))
    return pairs


def objective_cases(scale: Scale, rng: np.random.Generator) -> Iterator[GradCase]:
    """Full objectives through a micro network, fog-pass filters frozen."""
    setup = _micro_setup(scale, rng)
    resample_images = _redraw(*setup.images.values(), low=0.0, high=1.0)
    filter_params = [p for f in setup.filters.values() for p in f.parameters()]

    def cw_sf() -> Tensor:
        with frozen(filter_params):
            fwd_cw = setup.net(setup.images[Domain.CW])
            fwd_sf = setup.net(setup.images[Domain.SF])
            terms = objective_cw_sf(
                fwd_cw, fwd_sf, setup.labels, _style_pairs(setup, fwd_cw, fwd_sf), WEIGHTS
            )
        return terms.total

    def d_rf() -> Tensor:
        with frozen(filter_params):
            fwd_d = setup.net(setup.images[Domain.SF])
            fwd_rf = setup.net(setup.images[Domain.RF])
            terms = objective_d_rf(
                fwd_d, setup.labels, _style_pairs(setup, fwd_d, fwd_rf), WEIGHTS, Domain.SF
            )
        return terms.total

    def filters_on_network() -> Tensor:
        with frozen(setup.net.parameters()):
            factors = []
            for domain, image in setup.images.items():
                for view in (image, Tensor(image.data[:, ::-1].copy())):
                    u = gram_vector(setup.net(view).taps["C1"], "C1").values
                    factors.append(FogFactor(setup.filters["C1"](u), domain, "C1"))
            return filter_loss(factors, MARGIN)

    net_params = setup.net.parameters()
    yield GradCase("objective_cw_sf", "objective", cw_sf, net_params, resample_images)
    yield GradCase("objective_d_rf", "objective", d_rf, net_params, resample_images)
    yield GradCase(
        "filter_loss_on_network",
        "objective",
        filters_on_network,
        setup.filters["C1"].parameters(),
        resample_images,
    )


def frozen_filter_gradient(scale: Scale, rng: np.random.Generator) -> float:
    """Largest gradient magnitude reaching frozen filters through both objectives."""
    setup = _micro_setup(scale, rng)
    filter_params = [p for f in setup.filters.values() for p in f.parameters()]
    worst = 0.0
    for p in filter_params:
        p.zero_grad()
    with frozen(filter_params), Tape() as tape:
        fwd_cw = setup.net(setup.images[Domain.CW])
        fwd_sf = setup.net(setup.images[Domain.SF])
        fwd_rf = setup.net(setup.images[Domain.RF])
        total = (
            objective_cw_sf(
                fwd_cw, fwd_sf, setup.labels, _style_pairs(setup, fwd_cw, fwd_sf), WEIGHTS
            ).total
            + objective_d_rf(
                fwd_cw, setup.labels, _style_pairs(setup, fwd_cw, fwd_rf), WEIGHTS, Domain.CW
            ).total
        )
    tape.backward(total)
    for p in filter_params:
        if p.grad is not None:
            worst = max(worst, float(np.abs(p.grad).max(initial=0.0)))
    tape.clear()
    return worst


def run_battery(scale_name: str = "micro", seed: int = 0) -> list[CaseResult]:
    """Run every case and return the per-case maximum relative errors.

    Raises:
        ValueError: If the scale is unknown
    """
    if scale_name not in SCALES:
        msg = f"Unknown scale: {scale_name}. Available scales: {list(SCALES)}"
        raise ValueError(msg)
    scale = SCALES[scale_name]
    rng = np.random.default_rng(seed)
    cases = [*primitive_cases(rng), *loss_cases(rng), *objective_cases(scale, rng)]

    results = []
    for index, case in enumerate(cases):
        try:
            error = grad_check(
                case.loss_fn,
                case.params,
                epsilon=EPSILON,
                seed=seed + index,
                samples=SAMPLES,
                resample=case.resample,
            )
        except GradCheckError as e:
            logger.error("Case %s: %s", case.name, e)
            error = float("inf")
        results.append(CaseResult(case.name, case.group, error))
        logger.debug("grad-check %s: %.3e", case.name, error)

    frozen_error = frozen_filter_gradient(scale, rng)
    results.append(CaseResult("frozen_filter_gradient", "objective", frozen_error))
    return results


def format_report(results: list[CaseResult]) -> str:
    lines = [
        f"{'PASS' if r.passed else 'FAIL'}  {r.group:<9} {r.name:<26} {r.max_error:.3e}"
        for r in results
    ]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} cases passed (tolerance {TOLERANCE:g})")
    return "\n".join(lines)


def verify(
    scale_name: str = "micro",
    seed: int = 0,
    report: Callable[[list[CaseResult]], None] | None = None,
) -> list[CaseResult]:
    """Run the battery and raise when any case fails.

    Args:
        scale_name: Battery scale
        seed: Seed for parameters and sampled coordinates
        report: Called with all results before the pass/fail decision

    Raises:
        VerificationFailed: Naming the failing cases with their errors
    """
    results = run_battery(scale_name, seed)
    if report is not None:
        report(results)
    failed = [r for r in results if not r.passed]
    if failed:
        names = ", ".join(f"{r.name} ({r.max_error:.3e})" for r in failed)
        msg = f"gradient check failed: {names}"
        raise VerificationFailed(msg)
    return results
