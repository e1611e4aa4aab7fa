//! Fixtures shared by the benchmarks: the default synthetic atlas and
//! cohort with its k = 30 graphs.

use tractgraph::features::Cohort;
use tractgraph::geometry::{distance_matrix, DistanceMatrix, FiberMetric};
use tractgraph::graph::{build_cmg, build_gmg, build_wmg, ClusterGraph};
use tractgraph::synth::{gen_atlas, gen_cohort, AtlasDescriptor, SyntheticAtlasConfig, SyntheticCohortConfig};

pub struct Fixture {
    pub atlas: AtlasDescriptor,
    pub cohort: Cohort,
    pub distances: DistanceMatrix,
    pub cmg: ClusterGraph,
}

pub fn fixture() -> Fixture {
    let atlas = gen_atlas(&SyntheticAtlasConfig::default()).expect("default atlas");
    let cohort = gen_cohort(&atlas, &SyntheticCohortConfig::default()).expect("default cohort").cohort;
    let distances = distance_matrix(&atlas.atlas.clusters, 20, FiberMetric::MinimumDirectFlip).expect("distances");
    let wmg = build_wmg(&distances, 30).expect("wmg");
    let gmg = build_gmg(&atlas.overlaps).expect("gmg");
    let cmg = build_cmg(&wmg, &gmg).expect("cmg");
    Fixture {
        atlas,
        cohort,
        distances,
        cmg,
    }
}
