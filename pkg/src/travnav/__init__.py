"""Risk-aware traversability mapping, planning and control."""
import json
from importlib import resources

__version__ = "0.1.0"


def load_schema(name: str) -> dict:
    """JSON schema shipped with the package, e.g. ``load_schema("episode_result")``."""
    return json.loads(resources.files("travnav").joinpath("schemas", f"{name}.schema.json").read_text())
