"""Config-driven training and evaluation shared by the CLI and the sweeps."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from deltafm import data as data_mod
from deltafm import metrics, model as model_mod, sampler
from deltafm.config import RunConfig
from deltafm.objective import mean_trajectory_of
from deltafm.trainer import TrainConfig, train

GUIDANCE_MODES = {"standard": "standard_cfg", "hat": "hat_cfg", "tilde": "tilde_cfg"}


def build_dataset(cfg: RunConfig):
    """Training cloud and, for synthetic data, the generating spec."""
    d = cfg.data
    if d.name == "two_gaussians":
        return data_mod.two_gaussians(d.separation, d.scale, d.n_per_class, d.seed)
    if d.name == "mixture":
        spec = data_mod.GaussianMixtureSpec.from_dict(d.spec)
        return spec.sample(d.n_per_class, np.random.default_rng(d.seed)), spec
    return data_mod.load_csv(d.csv_path), None


def build_spec(cfg: RunConfig):
    d = cfg.data
    if d.name == "two_gaussians":
        return data_mod.two_gaussians_spec(d.separation, d.scale)
    if d.name == "mixture":
        return data_mod.GaussianMixtureSpec.from_dict(d.spec)
    return None


def build_model(cfg: RunConfig, cloud):
    m = cfg.model
    return model_mod.init(cloud.dim, m.hidden_dims, cloud.num_classes, m.time_features, m.class_embed_dim, m.seed)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(batch_size=t.batch_size, iterations=t.iterations, learning_rate=t.learning_rate,
                       lam=cfg.objective.lam, p_uncond=t.p_uncond, seed=t.seed, optimizer=t.optimizer,
                       beta1=t.beta1, beta2=t.beta2, adam_eps=t.eps)


def sampler_config(cfg: RunConfig) -> sampler.SamplerConfig:
    s = cfg.sampler
    return sampler.SamplerConfig(s.kind, s.nfe, s.diffusion_scale, s.seed)


def guidance_config(cfg: RunConfig, t_hat=None) -> sampler.GuidanceConfig:
    g = cfg.guidance
    if g.mode == "off":
        return sampler.OFF
    lam = cfg.objective.lam if g.lam is None else g.lam
    return sampler.GuidanceConfig(True, g.w, g.sigma_low, g.sigma_high, lam, t_hat, GUIDANCE_MODES[g.mode])


def run_training(cfg: RunConfig, callback=None):
    cloud, spec = build_dataset(cfg)
    model = build_model(cfg, cloud)
    model, history = train(model, cloud, train_config(cfg), callback=callback)
    return model, history, cloud, spec


def digest(model) -> str:
    return hashlib.sha256(model_mod.dumps(model)).hexdigest()


def evaluate(model, spec, n_per_class=2000, n_paths=500, sampler_cfg=sampler.SamplerConfig(),
             guidance=sampler.OFF, seed=1234, reference=None) -> metrics.MetricsReport:
    """Per-class W2 against fresh true samples, ambiguity, and 0-vs-1 flow overlap.

    Every class is sampled from the same initial noise so comparisons between
    classes and between models use common random numbers. ``reference`` may
    supply true samples per class when no spec is available.
    """
    num_classes = spec.num_classes if spec is not None else len(reference)
    per_class = {}
    rng = np.random.default_rng(seed)
    for c in range(num_classes):
        if reference is not None:
            truth = reference[c]
        else:
            truth = spec.sample(n_per_class, rng).of_class(c)
        xs = sampler.sample(model, len(truth), c, sampler_cfg, guidance)
        row = {"wasserstein2": metrics.wasserstein2(xs, truth)}
        row["ambiguity_fraction"] = (metrics.ambiguity_fraction(xs, c, spec, 0.5)
                                     if spec is not None and num_classes > 1 else float("nan"))
        per_class[c] = row

    overlap = distance = float("nan")
    if num_classes >= 2:
        eps = np.random.default_rng(seed + 1).standard_normal((n_paths, model.input_dim))
        pa = sampler.paths(model, eps, 0, sampler_cfg, guidance)
        pb = sampler.paths(model, eps, 1, sampler_cfg, guidance)
        distance = metrics.mean_nn_distance(pa, pb)
        overlap = float(np.exp(-distance))
    return metrics.MetricsReport(
        wasserstein2=float(np.mean([r["wasserstein2"] for r in per_class.values()])),
        ambiguity_fraction=float(np.mean([r["ambiguity_fraction"] for r in per_class.values()])),
        flow_overlap=overlap, flow_distance=distance, per_class=per_class)


def evaluate_config(model, cfg: RunConfig, spec=None, cloud=None, guidance=None, nfe=None):
    spec = spec if spec is not None else build_spec(cfg)
    reference = None
    if spec is None:
        reference = [cloud.of_class(c)[: cfg.eval.n_per_class] for c in range(cloud.num_classes)]
    scfg = sampler_config(cfg)
    if nfe is not None:
        scfg = sampler.SamplerConfig(scfg.kind, nfe, scfg.diffusion_scale, scfg.seed)
    if guidance is None:
        t_hat = mean_trajectory_of(cloud.points) if cloud is not None else None
        guidance = guidance_config(cfg, t_hat)
    return evaluate(model, spec, cfg.eval.n_per_class, cfg.eval.n_paths, scfg, guidance, cfg.eval.seed, reference)


@dataclass
class SweepRow:
    axis: str
    value: float
    seed: int
    report: metrics.MetricsReport
    digest: str = ""

    def as_dict(self):
        r = self.report
        return {"axis": self.axis, "value": self.value, "seed": self.seed, "wasserstein2": r.wasserstein2,
                "ambiguity_fraction": r.ambiguity_fraction, "flow_overlap": r.flow_overlap,
                "flow_distance": r.flow_distance, "digest": self.digest}
