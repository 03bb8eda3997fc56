//! Fixtures shared by the criterion benches.

use std::sync::Arc;

use kalpert::alpert::AtomFamily;
use kalpert::extension::FrequencyGrid;
use kalpert::frame::{FrameContext, Window};
use kalpert::kakeya::{generate_family, FamilyKind, TubeFamily};
use kalpert::quad::{RuleBuilder, TensorGrid};
use kalpert::{Complex64, Placement, SampledField2D};

/// Smooth bump on `[-1/4, 1/4]²` sampled on a composite Gauss grid.
pub fn bump(panels: usize) -> SampledField2D {
    let w = 0.5 / panels as f64;
    let rule = RuleBuilder::new(-0.25, 0.25).order(8).max_width(w).build();
    let grid = TensorGrid::new(rule.clone(), rule);
    SampledField2D::from_fn(grid, |x, y| {
        let r2 = 16.0 * (x * x + y * y);
        Complex64::new((1.0 - r2).max(0.0).powi(3), 0.0)
    })
}

pub fn frequency_grid(radius: f64) -> Arc<FrequencyGrid> {
    FrequencyGrid::new(radius, 0.5).expect("grid")
}

pub fn frame(kappa: usize, max_level: i32) -> FrameContext {
    let fam = AtomFamily::new(kappa, 0.02).expect("family");
    let place = Placement::new([-0.25, -0.25], 0.5).expect("placement");
    FrameContext::new(fam, place, Window::new(0, max_level).expect("window")).expect("frame")
}

pub fn tubes(kind: FamilyKind, delta: f64, seed: u64) -> TubeFamily {
    generate_family(kind, delta, seed).expect("family")
}
