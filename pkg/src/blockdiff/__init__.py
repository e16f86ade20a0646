"""Semi-autoregressive masked-diffusion language modeling.

Absorbing-state diffusion within blocks, autoregressive conditioning across
blocks, classifier-guided sampling, and a PPO-trained dynamic block-length
policy, at a scale that trains and verifies on one CPU.
"""

from .classifier import NoisedSequenceClassifier
from .corpus import Tokenizer, make_sentiment_corpus, make_textlike_corpus
from .denoiser import MaskedDiffusionLM
from .diffusion import (
    NoiseSchedule,
    Vocab,
    alpha_at,
    diffusion_loss,
    forward_marginal,
    forward_sample,
    posterior_marginalized,
    reverse_posterior,
)
from .guidance import (
    GuidanceConfig,
    guided_posterior_exact,
    guided_posterior_factorized,
    guided_posterior_taylor,
)
from .metrics import MetricReport, bpc, control_accuracy, dist_n, perplexity
from .policy import (
    BlockLengthPolicy,
    PPOConfig,
    compute_reward,
    extract_state,
    gae_advantages,
)
from .sampling import (
    BlockLayout,
    SamplerConfig,
    first_hitting_times,
    generate_block,
    generate_sequence,
    gumbel_argmax,
    sequence_nll_bound,
)

__all__ = [
    "BlockLayout",
    "BlockLengthPolicy",
    "GuidanceConfig",
    "MaskedDiffusionLM",
    "MetricReport",
    "NoiseSchedule",
    "NoisedSequenceClassifier",
    "PPOConfig",
    "SamplerConfig",
    "Tokenizer",
    "Vocab",
    "alpha_at",
    "bpc",
    "compute_reward",
    "control_accuracy",
    "diffusion_loss",
    "dist_n",
    "extract_state",
    "first_hitting_times",
    "forward_marginal",
    "forward_sample",
    "gae_advantages",
    "generate_block",
    "generate_sequence",
    "guided_posterior_exact",
    "guided_posterior_factorized",
    "guided_posterior_taylor",
    "gumbel_argmax",
    "make_sentiment_corpus",
    "make_textlike_corpus",
    "perplexity",
    "posterior_marginalized",
    "reverse_posterior",
    "sequence_nll_bound",
]

__version__ = "0.1.0"
