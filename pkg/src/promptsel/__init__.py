"""Sequential selection of the best prompt candidate under noisy evaluations.

Two-stage workflow: grow a latent candidate pool by perturbation sampling and
project it to a low-dimensional soft-prompt space (``search``); then spend an
evaluation budget with a Bayesian surrogate and an upper-confidence
acquisition, warm-started by a replicated variance-estimation phase
(``surrogate``, ``posterior``, ``acquisition``, ``loop``).  A learned-kernel
kriging refinement over the latent box (``psk``) and a config-driven
experiment harness (``cli``) round out the toolkit.
"""

from .acquisition import (
    AcquisitionConfig,
    PrConfig,
    PrState,
    argmax_mucb,
    candidate_stats,
    default_beta,
    default_gamma,
    mucb,
    mucb_values,
    pr_gradient_estimate,
    pr_sample_candidate,
    pr_sga_optimize,
)
from .core import (
    CandidateSet,
    LatentVector,
    Observation,
    ObservationLog,
    SoftPrompt,
    final_selection,
    record_observation,
    sample_mean,
)
from .loop import (
    HyperPair,
    OracleError,
    RunResult,
    SamplerChoice,
    SkModel,
    WarmupReport,
    choose_warmup_set,
    fit_variance_model,
    run_mucb_loop,
    run_prmucb_loop,
    run_warmup,
    sk_synthetic_draw,
    tune_hyperparameters,
)
from .posterior import (
    HmcConfig,
    PosteriorSampleSet,
    ViState,
    exact_gaussian_sample,
    hmc_sample,
    leapfrog,
    vi_fit,
    vi_sample,
)
from .psk import (
    ProjectionMap,
    PskModel,
    expected_improvement,
    psk_fit,
    psk_log_likelihood,
    psk_predict,
    psk_select_dimension,
    refine_search,
)
from .scoring import (
    BaselineSet,
    LlmEvaluator,
    LlmEvaluatorConfig,
    ResponseParseError,
    ScoreFunctionConfig,
    SyntheticOracle,
    TransportError,
    cosine_similarity,
    llm_evaluate,
    make_landscape,
    score_texts,
    synthetic_evaluate,
    tokenize,
)
from .search import (
    HashEmbeddingProvider,
    PartialSetError,
    SearchConfig,
    candidate_set_from_latents,
    extend_latent_set,
    pca_project,
    perturbation_covariance,
    seed_probabilities,
    select_seed,
)
from .surrogate import (
    GaussianPosterior,
    IdentityFeatures,
    RandomFourierFeatures,
    SurrogateSpec,
    blr_exact_posterior,
    forward,
    forward_batch,
    gp_function_space_predict,
    grad_log_posterior,
    log_posterior_density,
)

__version__ = "0.1.0"
