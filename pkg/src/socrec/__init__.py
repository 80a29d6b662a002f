"""Social recommendation engine.

A self-contained implementation of a succinct multi-network graph model for
implicit-feedback social recommendation: feature projections with Gaussian
-prior free embeddings, linear social aggregation, positive/negative interest
propagation over a user-item bipartite graph, four negative-sampling
strategies (fixed, static, dynamic, generative), squared-error training with
Adam, a social-regularized matrix-factorization baseline, and an HR@K /
NDCG@K ranking evaluation harness. Everything runs on a small reverse-mode
differentiation core verified by finite differences.
"""

from .autodiff import (AdamState, GradCheckReport, Layer, Parameter, Tensor,
                       adam_step, backward, finite_diff_check, matmul,
                       mlp_forward, sigmoid, spmm)
from .data import (BipartiteInteractions, Dataset, DatasetSplit, SynthConfig,
                   build_bipartite, load_dataset, load_dataset_dir,
                   save_dataset, split_dataset, synth_generate)
from .evaluation import (MetricsReport, RankingProtocol, evaluate, hr_at_k,
                         ndcg_at_k, rank_candidates)
from .model import (ModelConfig, ModelParams, PriorEmbeddings, forward,
                    hidden_reps, init_params, init_priors, interest_propagate,
                    predict, social_aggregate)
from .sampling import (GeneratorParams, NegativeSampleSet, SamplerConfig,
                       assemble_negatives, generate_fake, pool, sample_alpha,
                       uniform_sample)
from .sparse import SparseMatrix
from .training import (TrainingConfig, TrainReport, fit, mse_loss, train_epoch)
from .baseline_mf import MFConfig, MFParams, init_mf, mf_fit, mf_loss, similarity

__version__ = "0.1.0"
