//! Independent oracles: finite differences, dual-path fusion checks,
//! closed-form parameter counting and identity-at-init certification.

mod count;
mod fusion;
mod gradcheck;
mod identity;
mod report;
mod routing;

pub use count::{count_trainable_params, enumerate_trainable_params, ParamCount};
pub use fusion::{check_fusion_equivalence, compare_fused, fusion_sweep, random_inputs, SWEEP_AGENT_STD};
pub use gradcheck::{
    compare_gradients, finite_diff_grad, gradcheck_fixture, gradcheck_random, gradcheck_sites, GradcheckFixture,
    GradcheckOptions,
};
pub use identity::{check_identity_at_init, check_identity_with};
pub use report::{rel_error, reports_csv, CheckReport, REPORT_CSV_HEADER};
pub use routing::{gradient_sources, GradientSources};
