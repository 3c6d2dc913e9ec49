"""Experiment configuration: flat ``key=value`` text with dotted sections.

Sections: ``agent.*`` (agent and loss hyperparameters), ``env.*``
(environment name and constructor arguments), ``harness.*``, ``run.*`` and
``verify.*``. Values are typed by the defaults they override; unknown keys
are errors.
"""

import dataclasses
import inspect
from dataclasses import dataclass, field, fields

from staclab import losses
from staclab.agent import AgentConfig
from staclab.harness.envs import make_env
from staclab.harness.pipeline import HarnessConfig

MODES = ("impala", "stac", "stacx")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    mode: str = "stac"
    total_steps: int = 100_000
    seeds: tuple = (0,)
    log_period: int = 10
    out_dir: str = "runs"
    meta_mask: tuple = None
    checkpoint: bool = True


@dataclass(frozen=True)
class VerifySettings:
    instances: int = 100
    seed: int = 0
    alpha_mode: str = "tied"
    iterations: int = 200
    pairs: int = 100
    metagrad_batches: int = 20
    metagrad_tol: float = 1e-4


@dataclass(frozen=True)
class AgentSettings:
    torso: tuple = (64,)
    head_hidden: int = 32
    num_heads: int = None  # None: decided by the mode
    continuous: bool = None  # None: follows the environment
    split_alpha: bool = False
    lr_start: float = 6e-4
    lr_end: float = 0.0
    rms_decay: float = 0.99
    rms_eps: float = 0.1
    through_denominator: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    agent: AgentSettings = field(default_factory=AgentSettings)
    hyper: losses.HyperParams = field(default_factory=losses.HyperParams)
    env: dict = field(default_factory=lambda: {"name": "gridworld"})
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    run: RunSettings = field(default_factory=RunSettings)
    verify: VerifySettings = field(default_factory=VerifySettings)

    def validate(self):
        if self.run.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {self.run.mode!r}")
        if self.run.total_steps <= 0 or self.run.log_period <= 0 or not self.run.seeds:
            raise ConfigError("run.total_steps and run.log_period must be positive and run.seeds non-empty")
        if self.verify.alpha_mode not in ("tied", "independent", "random"):
            raise ConfigError(f"unknown verify.alpha_mode {self.verify.alpha_mode!r}")
        names = losses.meta_names(self.agent.split_alpha)
        if self.run.meta_mask is not None:
            bad = set(self.run.meta_mask) - set(names)
            if bad:
                raise ConfigError(f"unknown metaparameters in mask: {sorted(bad)}; choose from {names}")
        if not 0.0 <= self.hyper.gamma_outer <= 1.0 or self.hyper.rho_bar < self.hyper.c_bar:
            raise ConfigError("need gamma_outer in [0, 1] and rho_bar >= c_bar")
        try:
            self.make_env()
        except (TypeError, ValueError) as err:
            raise ConfigError(f"invalid environment spec {self.env}: {err}") from err
        return self

    def make_env(self):
        return make_env(self.env)

    def agent_config(self, seed):
        """Effective :class:`AgentConfig` for one seed, mode rules applied."""
        env = self.make_env()
        mode = self.run.mode
        hyper = self.hyper
        mask = self.run.meta_mask
        heads = self.agent.num_heads or (3 if mode == "stacx" else 1)
        if mode == "impala":
            hyper = dataclasses.replace(hyper, meta_lr=0.0)
            mask = ()
            heads = 1
        continuous = env.continuous if self.agent.continuous is None else self.agent.continuous
        num_actions = env.action_space.shape[0] if continuous else env.action_space.n
        updates = max(1, self.run.total_steps // (self.harness.batch_size * self.harness.unroll))
        a = self.agent
        return AgentConfig(
            obs_dim=env.observation_dim,
            num_actions=num_actions,
            continuous=continuous,
            torso=a.torso,
            head_hidden=a.head_hidden,
            num_heads=heads,
            split_alpha=a.split_alpha,
            meta_mask=mask,
            hyper=hyper,
            lr_start=a.lr_start,
            lr_end=a.lr_end,
            rms_decay=a.rms_decay,
            rms_eps=a.rms_eps,
            total_updates=updates,
            through_denominator=a.through_denominator,
            seed=seed,
        )

    def harness_config(self, seed, deterministic=None):
        h = dataclasses.replace(self.harness, seed=seed)
        if deterministic is not None:
            h = dataclasses.replace(h, deterministic=deterministic)
        return h

    def to_text(self):
        """Serialise every effective value; parsing the text gives an equal config."""
        lines = []
        for section, obj in (("agent", self.agent), ("agent", self.hyper), ("harness", self.harness), ("run", self.run), ("verify", self.verify)):
            for f in fields(obj):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        for k, v in self.env.items():
            lines.append(f"env.{k} = {_format(v)}")
        return "\n".join(lines) + "\n"


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v) if v else "{}"
    return str(v)


def _parse_scalar(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_like(text, default, name):
    text = text.strip()
    if text.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple) or name in ("seeds", "meta_mask", "torso"):
            if text in ("{}", ""):
                return ()
            items = [t.strip() for t in text.strip("{}()[]").split(",") if t.strip()]
            return tuple(_parse_scalar(t) for t in items)
        if default is None and name in ("num_heads",):
            return int(text)
        if default is None and name in ("continuous",):
            return _parse_like(text, False, name)
        return text
    except ValueError as err:
        raise ConfigError(f"cannot parse {name}={text!r}") from err


_PLAIN_SECTIONS = ("harness", "run", "verify")


def parse_assignments(pairs, base=None):
    """Apply ``["section.key=value", ...]`` to ``base`` (default config)."""
    cfg = base or ExperimentConfig()
    updates = {"agent": {}, "hyper": {}, "harness": {}, "run": {}, "verify": {}}
    env = dict(cfg.env)
    agent_fields = {f.name: f for f in fields(AgentSettings)}
    hyper_fields = {f.name: f for f in fields(losses.HyperParams)}
    for raw in pairs:
        if "=" not in raw:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, value = (s.strip() for s in raw.split("=", 1))
        if "." not in key:
            raise ConfigError(f"key {key!r} needs a section prefix (agent., env., harness., run., verify.)")
        section, name = key.split(".", 1)
        if section == "env":
            if name == "name":
                if value.lower() != str(env.get("name", "")).lower():
                    env = {}
                env["name"] = value.lower()
            else:
                env[name] = _parse_scalar(value)
            continue
        if section == "agent":
            if name in agent_fields:
                updates["agent"][name] = _parse_like(value, getattr(cfg.agent, name), name)
            elif name in hyper_fields:
                updates["hyper"][name] = _parse_like(value, getattr(cfg.hyper, name), name)
            else:
                raise ConfigError(f"unknown key {key!r}")
            continue
        if section not in _PLAIN_SECTIONS:
            raise ConfigError(f"unknown section in {key!r}")
        obj = getattr(cfg, section)
        if name not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown key {key!r}")
        updates[section][name] = _parse_like(value, getattr(obj, name), name)
    try:
        new = ExperimentConfig(
            agent=dataclasses.replace(cfg.agent, **updates["agent"]),
            hyper=dataclasses.replace(cfg.hyper, **updates["hyper"]),
            env=env,
            harness=dataclasses.replace(cfg.harness, **updates["harness"]),
            run=dataclasses.replace(cfg.run, **updates["run"]),
            verify=dataclasses.replace(cfg.verify, **updates["verify"]),
        )
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from err
    _check_env_keys(env)
    return new


def _check_env_keys(env):
    from staclab.harness import envs

    table = {"chain": envs.ChainMDP, "gridworld": envs.GridWorld, "random": envs.RandomMDP, "pointmass": envs.PointMass}
    name = env.get("name")
    if name not in table:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(table)}")
    allowed = set(inspect.signature(table[name]).parameters)
    bad = set(env) - allowed - {"name"}
    if bad:
        raise ConfigError(f"unknown keys for env {name}: {sorted(bad)}")


def read_config_text(text):
    """Lines of ``key = value``; ``#`` starts a comment."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        pairs.append(line)
    return pairs


def load_config(path=None, overrides=(), base=None):
    pairs = []
    if path is not None:
        try:
            with open(path) as fh:
                pairs = read_config_text(fh.read())
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err}") from err
    return parse_assignments(list(pairs) + list(overrides), base).validate()
