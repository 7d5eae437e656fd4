//! Fixtures shared by the benchmarks.

use eit_core::dataset::ForwardModel;
use eit_core::fem::{build_adjacent_protocol, default_impedances};
use eit_core::mesh::{build_disk_mesh, DEFAULT_COVERAGE};
use eit_core::phantom::sample_phantom;
use eit_core::{ConductivityField, PhantomKind};

/// Sixteen-electrode adjacent setup on a disk mesh of the given refinement.
pub fn model(refinement: usize) -> ForwardModel {
    ForwardModel {
        mesh: build_disk_mesh(16, refinement, DEFAULT_COVERAGE).expect("valid mesh parameters"),
        impedances: default_impedances(16),
        protocol: build_adjacent_protocol(16, 1.0).expect("valid protocol"),
    }
}

pub fn two_anomaly(model: &ForwardModel, seed: u64) -> ConductivityField {
    sample_phantom(PhantomKind::Two, seed).paint(&model.mesh).expect("phantom fits the mesh")
}
