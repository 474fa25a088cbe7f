"""Semi-autoregressive captioning on numpy: an autoregressive Outliner emits
every k-th word, a one-pass Filler supplies the rest.

Modules: ``nn`` (autodiff core), ``masks``, ``model``, ``decoding``,
``training``, ``taskgen``, ``metrics``, ``maskexp``, ``bench``, ``config``
and ``cli`` (``python -m saic``).
"""

from .decoding import DecodeConfig, Hypothesis, decode
from .errors import ContractError, DimensionError, StateError
from .model import ModelConfig, encode, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_saic, train_teacher

__version__ = "0.1.0"
