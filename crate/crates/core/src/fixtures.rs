//! Data files compiled into the crate: the SOP atlas and planner config
//! under `sops/`, plus the replay fixtures under `fixtures/`.

use std::path::PathBuf;

pub(crate) const BUNDLED_SOPS: &[(&str, &str)] = &[
    ("developing.sop", include_str!("../../../sops/developing.sop")),
    ("lift_off.sop", include_str!("../../../sops/lift_off.sop")),
    ("patterning.sop", include_str!("../../../sops/patterning.sop")),
    ("pvd.sop", include_str!("../../../sops/pvd.sop")),
    ("rie.sop", include_str!("../../../sops/rie.sop")),
    ("spin_coating.sop", include_str!("../../../sops/spin_coating.sop")),
    ("wafer_cleaning.sop", include_str!("../../../sops/wafer_cleaning.sop")),
];

pub(crate) const PLANNER_CONFIG: &str = include_str!("../../../sops/planner.toml");

/// Directory holding the bundled `.sop` files and `planner.toml`.
pub fn sops_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../sops")
}

/// Directory holding the bundled replay fixtures.
pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}
