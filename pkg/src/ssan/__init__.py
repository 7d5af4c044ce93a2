"""Self-attention sentence classifiers on a small numpy autodiff core."""
from . import attention, bench, data, model, tensor, train
from .attention import AttentionSpec, PositionMethod, RelativePositionTable
from .bench import count_parameters
from .data import Corpus, Vocabulary, load_corpus, load_embeddings
from .model import Arch, Batch, ModelSpec, forward, init_params, ssan_spec
from .tensor import Tensor, backward
from .train import TrainConfig, evaluate, run_protocol, train_one

__version__ = "0.1.0"
