"""Named method presets: flag bundles applied on top of the baseline agent.

Each preset maps to the keyword overrides for :class:`varlab.agent.AgentConfig`.
``combined`` stacks the three complementary stabilizers (actor + critic
penultimate normalization, pre-tanh penalty, and a bounded self-supervised
warm-up phase); ``combined_pp`` additionally switches the critic target to the
averaged twin estimate and keeps the self-supervised loss on for the whole run.
"""
from __future__ import annotations

from varlab.agent import AgentConfig

# ssl_steps < 0 means "for the whole run"
PRESETS: dict[str, dict] = {
    "baseline": {},
    "penalty": {"penalty_lambda": 1e-6},
    "actor_pnorm": {"actor_pnorm": True},
    "both_pnorm": {"actor_pnorm": True, "critic_pnorm": True},
    "layer_norm": {"layer_norm": True},
    "lr_warmup": {"warmup_steps": 2000},
    "grad_clip_1": {"grad_clip": 1.0},
    "grad_clip_10": {"grad_clip": 10.0},
    "spectral": {"spectral": True},
    "scale_down": {"scale_down": 100.0},
    "output_norm": {"output_norm": True},
    "combined": {"actor_pnorm": True, "critic_pnorm": True,
                 "penalty_lambda": 1e-6, "ssl_steps": 5000},
    "combined_pp": {"actor_pnorm": True, "critic_pnorm": True,
                    "penalty_lambda": 1e-6, "ssl_steps": -1,
                    "asym_clip": True},
}


def preset_config(name: str, **overrides) -> AgentConfig:
    """Expand a preset name plus explicit overrides into one AgentConfig."""
    if name not in PRESETS:
        raise ValueError(
            f"unknown preset {name!r}; valid: {', '.join(sorted(PRESETS))}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return AgentConfig(**kw)
