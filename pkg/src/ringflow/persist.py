"""Save and load trained models with a role tag in the shared model-file format."""
from __future__ import annotations

from .errors import ModelFormatError, RoleMismatchError
from .generator import GeneratorModel
from .neural import read_model_file, write_model_file
from .policy import PolicyModel
from .ring import ActionBounds

ROLES = ("generator", "policy")


def save_model(model, role: str, path) -> None:
    if role == "generator":
        if not isinstance(model, GeneratorModel):
            raise TypeError("role 'generator' needs a GeneratorModel")
        meta = {"n_slots": model.n_slots, "radius": repr(model.radius)}
        write_model_file(path, role, meta, {"net": model.net}, {"log_std": model.log_std})
    elif role == "policy":
        if not isinstance(model, PolicyModel):
            raise TypeError("role 'policy' needs a PolicyModel")
        b = model.bounds
        meta = {"a_min": repr(b.a_min), "a_max": repr(b.a_max), "v_min": repr(b.v_min), "v_max": repr(b.v_max)}
        nets = {"actor": model.actor, "critic": model.critic}
        write_model_file(path, role, meta, nets, {"log_std": model.log_std})
    else:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")


def load_model(path, role: str | None = None):
    """Load a model; if ``role`` is given, a file tagged otherwise raises RoleMismatchError."""
    found, meta, nets, vectors = read_model_file(path)
    if role is not None and found != role:
        raise RoleMismatchError(f"{path}: expected a {role} model, file holds a {found} model")
    try:
        if found == "generator":
            net = nets["net"]
            model = GeneratorModel(int(meta["n_slots"]), float(meta["radius"]), hidden=net.sizes[1:-1], zero=True)
            if net.sizes[0] != model.context_dim:
                raise ModelFormatError(f"{path}: generator input width does not match its slot count")
            model.net = net
            model.log_std = vectors["log_std"].copy()
            return model
        if found == "policy":
            bounds = ActionBounds(*(float(meta[k]) for k in ("a_min", "a_max", "v_min", "v_max")))
            model = PolicyModel(bounds, zero=True)
            model.actor, model.critic = nets["actor"], nets["critic"]
            model.log_std = vectors["log_std"].copy()
            return model
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"{path}: incomplete {found} model ({exc})") from exc
    raise ModelFormatError(f"{path}: unknown role {found!r}")
