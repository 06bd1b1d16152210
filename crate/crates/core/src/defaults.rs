//! The shipped demonstration files, embedded at build time.

pub const DEFAULT_MODEL: &str = include_str!("../../../models/default.json");
pub const MICROGRID_ARCHITECTURE: &str = include_str!("../../../arch/microgrid.json");
pub const DEFAULT_CATALOG: &str = include_str!("../../../catalog/default.json");
