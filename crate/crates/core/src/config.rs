//! Shared numerical settings.

use serde::Serialize;

/// Tolerances and enumeration caps used by every check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Settings {
    /// Feasibility and active-set tolerance.
    pub feas_tol: f64,
    /// Branch-activity tolerance for max/min/abs nodes.
    pub kink_tol: f64,
    /// Relative singular-value threshold for ranks.
    pub rank_tol: f64,
    /// Maximum number of biactive branch assignments (3^|J*|).
    pub branch_cap: usize,
    /// Maximum number of subset/selection combinations per probe.
    pub subset_cap: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            feas_tol: 1e-8,
            kink_tol: 1e-9,
            rank_tol: 1e-8,
            branch_cap: 3usize.pow(12),
            subset_cap: 1 << 12,
        }
    }
}
