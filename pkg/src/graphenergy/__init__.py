"""Energy-based generation of attributed graphs.

A scalar potential over one-hot graph embeddings drives two discrete
samplers (greedy transport toward low energy, gradient-informed mixing under
Metropolis-Hastings), is trained by matching its input gradient to
transport displacements plus a contrastive term, and supports conditional
guidance and energy-weighted interpolation paths."""

from .graphs import (
    Edit,
    Graph,
    GraphSpec,
    apply_edit,
    decode,
    embed,
    enumerate_edits,
    local_cost,
    make_graph,
    permute,
    random_graph,
)
from .matching import (
    Coupling,
    Signature,
    fgw_cost_approx,
    histogram_signature,
    linear_assignment,
    minibatch_coupling,
    node_matching_align,
)
from .energy import (
    EnergyGradient,
    EnergyModel,
    init_model,
    load_checkpoint,
    loss_gradients,
    save_checkpoint,
)
from .proposals import (
    MIXING,
    TRANSPORT,
    ProposalConfig,
    ProposalOutcome,
    anneal_beta,
    greedy_step,
    mh_accept,
    mixing_logits,
    proposal_log_prob,
    regime_switch,
    sample_proposal,
)
from .sampler import (
    ChainState,
    SamplerConfig,
    SamplerReport,
    chain_rngs,
    init_data,
    init_noise,
    make_chain_state,
    run_batch,
    run_chain,
    run_chains_lockstep,
)
from .training import (
    TrainConfig,
    TrainResult,
    calibrate_sampler,
    contrastive_loss,
    flow_loss,
    sample_interpolant,
    train,
)
from .guidance import (
    CompositeEnergy,
    GuidanceConfig,
    PropertyRegressor,
    RegressorConfig,
    conditional_energy,
    edge_count_property,
    time_proxy,
    train_regressor,
)
from .geodesics import (
    GeodesicConfig,
    SplinePath,
    optimize_geodesic,
    optimize_geodesics,
    path_length,
    path_validity,
    sample_along_path,
    spline_eval,
)
from .data import (
    Dataset,
    ValenceRules,
    canonical_hash,
    exact_gibbs,
    generate_toy_dataset,
    stat_distance,
    validity,
    vun_metrics,
)

__version__ = "0.1.0"
