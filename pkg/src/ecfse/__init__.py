"""Linear equivalent-circuit state estimation for power networks."""

from importlib import resources

from .netmodel import Network, build_ybus, load_case, parse_matpower_case

BUNDLED_CASES = ("case2", "case5", "case14", "case118", "case2000")


def bundled_case_text(name: str) -> str:
    return resources.files(__package__).joinpath("data", f"{name}.m").read_text()


def load_bundled_case(name: str) -> Network:
    return parse_matpower_case(bundled_case_text(name))


__all__ = ["BUNDLED_CASES", "Network", "build_ybus", "bundled_case_text",
           "load_bundled_case", "load_case", "parse_matpower_case"]
