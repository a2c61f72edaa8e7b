"""latentdemand: counterfactual EV charging-queue replay and
censorship-aware spatiotemporal demand forecasting.

The package replays vehicle trip logs as an EV fleet under
capacity-constrained charging queues, producing hourly demand panels where
observed demand, true latent demand and censoring flags are all known, and
fits censorship-aware forecasters (Tobit and censored quantile regression
on a temporal graph-convolutional network) that recover latent demand from
observed records.
"""

__version__ = "0.1.0"

from .data_ingest import (  # noqa: F401
    DEFAULT_MARKET,
    EVModelSpec,
    EVehicle,
    Station,
    SynthConfig,
    Trip,
    generate_synthetic_stations,
    generate_synthetic_trips,
    load_stations,
    load_trips,
    sample_fleet,
)
from .errors import NumericalError, ValidationError  # noqa: F401
from .eval_metrics import (  # noqa: F401
    EvalReport,
    clip_panel,
    evaluate_forecaster,
    icp,
    market_share_censor,
    mil,
    quantiles_from_gaussian,
    run_experiment,
    seasonal_panel,
    seasonal_station_panel,
)
from .fleet_sim import (  # noqa: F401
    ChargeEvent,
    WillingnessParams,
    charge,
    choose_station,
    time_to_80,
    trip_consumption,
    update_soc,
    willingness_to_charge,
)
from .losses_training import (  # noqa: F401
    TrainConfig,
    censored_tilted_loss,
    gaussian_nll,
    make_windows,
    scale_panel,
    tilted_loss,
    tobit_loss,
    train,
)
from .queue_engine import (  # noqa: F401
    DemandLedger,
    DemandPanel,
    QueuePolicy,
    SimParams,
    StationPanel,
    aggregate_by_station,
    aggregate_demand,
    censorship_stats,
    run_counterfactual,
)
from .spatial_graph import (  # noqa: F401
    AdjacencyPair,
    ClusterAssignment,
    build_adjacency,
    haversine,
    kmeans_cluster,
)
from .tgcn_model import (  # noqa: F401
    GaussianForecast,
    QuantileForecast,
    TgcnConfig,
    gcn_forward,
    init_params,
    load_checkpoint,
    lstm_step,
    save_checkpoint,
    tgcn_forward,
)
