"""Few-shot diffusion training and pairwise-similarity domain adaptation."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .denoiser import Denoiser, DenoiserConfig, clone_params, init_params, param_count
from .diffusion import (
    DenoiserOutput,
    GaussianDataOracle,
    NoiseSchedule,
    build_schedule,
    loss_simple,
    loss_vlb,
    p_sample_loop,
    p_sample_step,
    posterior_params,
    predict_mu_from_eps,
    predict_x0_from_eps,
    q_sample,
)
from .metrics import (
    EvalReport,
    RandomConvBackend,
    evaluate,
    frechet_distance,
    intra_lpips,
    nearest_lpips,
    perceptual_distance,
)
from .pa_losses import (
    LossTerms,
    LossWeights,
    hf_mse_loss,
    hf_pairwise_loss,
    pairwise_sim_loss,
    similarity_rows,
    total_loss,
)
from .training import TrainConfig, Trainer, adapt, generate, train_scratch
from .wavelet import FrequencyBands, haar_decompose, haar_reconstruct, hf_sum

__version__ = "0.1.0"
