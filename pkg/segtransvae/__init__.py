from .model import ModelConfig, build_model, forward, complexity_report  # noqa: F401
from .train import TrainConfig, train_loop, evaluate  # noqa: F401
from ._version import __version__  # noqa: F401
