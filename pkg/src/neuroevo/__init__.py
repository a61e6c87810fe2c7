"""Evolution-strategies training of a dual-branch CNN with ensemble uncertainty estimates."""

from .data import Dataset, OrbitSample, PhantomParams, crossfold, gen_dataset, load_dataset, save_dataset
from .dropout import McEnsembleConfig, SgdConfig, mc_report, sgd_train
from .ensemble import EnsembleMember, MemorySink, DirectorySink, shannon_entropy, uq_report
from .es import EsConfig, NetworkProblem, es_step, train_es
from .nn import BatchForward, NetworkSpec, backward, forward, init_weights

__version__ = "0.1.0"
