"""Decentralized cooperative self-localization and multi-target tracking.

A library, simulator and CLI for belief-propagation tracking with
measurement-origin uncertainty: Gaussian-mixture and single-Gaussian belief
representations, centralized and decentralized (parallel-label) Gibbs
sampling of mixture products, and average consensus over a simulated agent
network.
"""

from .association import AssociationTable, compute_beta_gm, inner_bp
from .consensus import (
    ConsensusRunner,
    ConsensusState,
    NetworkGraph,
    average_consensus,
    max_consensus,
    metropolis_weights,
    sum_consensus,
)
from .filter import FilterConfig, FilterState, RngFactory, VARIANTS, infer, initial_state, step
from .gibbs import gibbs_product
from .gm import (
    CanonicalInfo,
    GaussianMixture,
    LikelihoodComponent,
    ScaledGaussian,
    canonicalize,
    fuse_prior_with_info,
    gaussian_fractional_power,
    gaussian_product_pair,
    gm_truncate,
    log_sum_exp,
    moment_match,
)
from .hogwild import hogwild_belief
from .messages import LikelihoodMessage, compute_gamma_msg, compute_lambda_msg, compute_phi_msg
from .metrics import OspaParams, agent_rmse, cardinality_stats, ospa
from .models import (
    AgentDynamics,
    LinearizedObservation,
    PtBelief,
    RangeBearingModel,
    TargetDynamics,
    agent_predict,
    linearize_range_bearing,
    range_bearing,
    target_predict,
)
from .scenario import FrameMeasurements, GroundTruth, Scenario, build_graphs, paper_scenario, synthesize_frame
from .single_gaussian import ScaledBeliefShard, extract_delta_single, fuse_shards, local_shard

__version__ = "0.1.0"
