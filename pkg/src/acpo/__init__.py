"""Attribution-based credit assignment for group policy optimization, at toy scale."""

from importlib import resources

__version__ = "0.1.0"


def data_path(name: str):
    """Path to a bundled data file (marker lexicon, example trace)."""
    return resources.files(__name__).joinpath("data", name)
