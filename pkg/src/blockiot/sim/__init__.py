from blockiot.sim.cohort import (
    ConditionTable,
    SyntheticCohort,
    SyntheticPatient,
    forced_patient,
    generate_cohort,
    load_condition_table,
)
from blockiot.sim.harness import (
    LoadReport,
    ReliabilityReport,
    inject_block_deletion,
    percentile,
    run_load_test,
    run_reliability_test,
)
from blockiot.sim.streams import (
    Anomaly,
    NetworkEndpoint,
    NodeEndpoint,
    StreamPlan,
    StreamReport,
    make_plan,
    run_stream,
    run_streams,
)
