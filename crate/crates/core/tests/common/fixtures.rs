//! Taxi example data, pipelines and a test policy.

use std::path::Path;

use lakekernel::engine::{parse_pipeline, PipelineSpec};
use lakekernel::runner::RunOptions;
use lakekernel::store::{ColumnType, Schema, TableData, Value};
use lakekernel::{LakeConfig, Lakehouse};

pub const POLICY: &str = r#"
whitelist = ["pandas==2.0", "polars==0.88"]

[[principal]]
name = "admin"
roles = ["admin"]

[[principal]]
name = "agent"
roles = ["reader", "runner"]

[[principal]]
name = "intern"
roles = ["reader"]

[[role]]
name = "admin"
permissions = [
  "ReadTable:*:*", "WriteBranch:*", "CreateBranch:*", "MergeInto:*",
  "RunPipeline:*", "RegisterVerifier", "ManagePolicy",
]

[[role]]
name = "reader"
permissions = ["ReadTable:*:*"]

[[role]]
name = "runner"
permissions = ["RunPipeline:*", "CreateBranch:run/*", "WriteBranch:run/*"]
"#;

pub const TAXI: &str = "\
pipeline taxi
node parent:
  inputs: taxi_trips, taxi_zones
  env: runtime=python3.10 packages=[pandas==2.0]
  materialize: REPLACE
  query: SELECT taxi_trips.trip_id AS trip_id, taxi_zones.borough AS borough,
      taxi_trips.fare AS fare, taxi_trips.passengers AS passengers
    FROM taxi_trips JOIN taxi_zones ON taxi_trips.zone_id = taxi_zones.zone_id
node child:
  inputs: parent
  env: runtime=python3.10 packages=[pandas==2.0]
  materialize: REPLACE
  query: SELECT borough, count(*) AS trips, sum(fare) AS revenue FROM parent GROUP BY borough
";

/// Same shape, but `child` divides by a column that contains zero.
pub const TAXI_DIV_ZERO: &str = "\
pipeline taxi
node parent:
  inputs: taxi_trips, taxi_zones
  env: runtime=python3.10 packages=[pandas==2.0]
  materialize: REPLACE
  query: SELECT taxi_trips.trip_id AS trip_id, taxi_zones.borough AS borough,
      taxi_trips.fare AS fare, taxi_trips.passengers AS passengers
    FROM taxi_trips JOIN taxi_zones ON taxi_trips.zone_id = taxi_zones.zone_id
node child:
  inputs: parent
  env: runtime=python3.10 packages=[pandas==2.0]
  materialize: REPLACE
  query: SELECT trip_id, fare / passengers AS fare_per_passenger FROM parent
";

/// The guard-clause repair of [`TAXI_DIV_ZERO`].
pub const TAXI_GUARDED: &str = "\
pipeline taxi
node parent:
  inputs: taxi_trips, taxi_zones
  env: runtime=python3.10 packages=[pandas==2.0]
  materialize: REPLACE
  query: SELECT taxi_trips.trip_id AS trip_id, taxi_zones.borough AS borough,
      taxi_trips.fare AS fare, taxi_trips.passengers AS passengers
    FROM taxi_trips JOIN taxi_zones ON taxi_trips.zone_id = taxi_zones.zone_id
node child:
  inputs: parent
  env: runtime=python3.10 packages=[pandas==2.0]
  materialize: REPLACE
  query: SELECT trip_id, fare / passengers AS fare_per_passenger FROM parent WHERE passengers != 0
";

pub fn spec(text: &str) -> PipelineSpec {
    parse_pipeline(text).unwrap()
}

pub fn trips() -> TableData {
    let schema = Schema::of(&[
        ("trip_id", ColumnType::Int64),
        ("zone_id", ColumnType::Int64),
        ("fare", ColumnType::Float64),
        ("passengers", ColumnType::Int64),
    ])
    .unwrap();
    let rows = [
        (1, 1, 12.5, 1),
        (2, 2, 30.0, 2),
        (3, 1, 8.0, 0),
        (4, 3, 55.25, 3),
        (5, 2, 9.75, 1),
    ]
    .iter()
    .map(|&(t, z, f, p)| vec![Value::Int(t), Value::Int(z), Value::Float(f), Value::Int(p)])
    .collect();
    TableData::new(schema, rows).unwrap()
}

pub fn zones() -> TableData {
    let schema = Schema::of(&[
        ("zone_id", ColumnType::Int64),
        ("borough", ColumnType::String),
    ])
    .unwrap();
    let rows = [(1, "Manhattan"), (2, "Brooklyn"), (3, "Queens")]
        .iter()
        .map(|&(z, b)| vec![Value::Int(z), Value::Str(b.into())])
        .collect();
    TableData::new(schema, rows).unwrap()
}

/// A deterministic lake with the test policy and taxi sources on main.
pub fn taxi_lake(dir: &Path) -> Lakehouse {
    std::fs::write(dir.join("policy.toml"), POLICY).unwrap();
    let lake = Lakehouse::open(LakeConfig::deterministic(dir, 7, 1_700_000_000)).unwrap();
    lake.init("admin").unwrap();
    lake.write_table("admin", "main", "taxi_trips", &trips(), "load trips")
        .unwrap();
    lake.write_table("admin", "main", "taxi_zones", &zones(), "load zones")
        .unwrap();
    lake
}

pub fn admin() -> RunOptions {
    RunOptions::new("admin")
}
