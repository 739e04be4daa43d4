//! The hypothetical two-trial dataset with race (Black = 1) as the single
//! effect modifier, plus its overlap-population counterpart.
//!
//! Bundled copies of the CSV files ship inside the library so the CLI can
//! reproduce the worked example without external inputs.

use crate::data_model::{
    Arm, CovariateSpec, EventLevel, IpdTrial, OutcomeKind, SubjectRecord, TrialId,
};

pub const EXAMPLE_AC_CSV: &str = include_str!("../fixtures/example_ac.csv");
pub const EXAMPLE_BC_CSV: &str = include_str!("../fixtures/example_bc.csv");
pub const EXAMPLE_AC_AGD_JSON: &str = include_str!("../fixtures/example_ac_agd.json");
pub const EXAMPLE_BC_AGD_JSON: &str = include_str!("../fixtures/example_bc_agd.json");
pub const PROTOCOL1_CONFIG_JSON: &str = include_str!("../fixtures/protocol1_config.json");
pub const PROTOCOL2_CONFIG_JSON: &str = include_str!("../fixtures/protocol2_config.json");
pub const PARADOX_SCENARIO_JSON: &str = include_str!("../fixtures/paradox_scenario.json");
pub const NO_MODIFICATION_SCENARIO_JSON: &str =
    include_str!("../fixtures/no_modification_scenario.json");

/// One cell of a 2×2×2 table: (Black, arm, outcome, count).
pub type Cell = (u8, Arm, u8, usize);

pub const EXAMPLE_AC_CELLS: [Cell; 8] = [
    (1, Arm::A, 0, 180),
    (1, Arm::A, 1, 20),
    (0, Arm::A, 0, 80),
    (0, Arm::A, 1, 320),
    (1, Arm::C, 0, 80),
    (1, Arm::C, 1, 120),
    (0, Arm::C, 0, 40),
    (0, Arm::C, 1, 360),
];

pub const EXAMPLE_BC_CELLS: [Cell; 8] = [
    (1, Arm::B, 0, 240),
    (1, Arm::B, 1, 160),
    (0, Arm::B, 0, 100),
    (0, Arm::B, 1, 100),
    (1, Arm::C, 0, 160),
    (1, Arm::C, 1, 240),
    (0, Arm::C, 0, 20),
    (0, Arm::C, 1, 180),
];

pub const OVERLAP_AC_CELLS: [Cell; 8] = [
    (1, Arm::A, 0, 180),
    (1, Arm::A, 1, 20),
    (0, Arm::A, 0, 40),
    (0, Arm::A, 1, 160),
    (1, Arm::C, 0, 80),
    (1, Arm::C, 1, 120),
    (0, Arm::C, 0, 20),
    (0, Arm::C, 1, 180),
];

pub const OVERLAP_BC_CELLS: [Cell; 8] = [
    (1, Arm::B, 0, 120),
    (1, Arm::B, 1, 80),
    (0, Arm::B, 0, 100),
    (0, Arm::B, 1, 100),
    (1, Arm::C, 0, 80),
    (1, Arm::C, 1, 120),
    (0, Arm::C, 0, 20),
    (0, Arm::C, 1, 180),
];

/// Expand cell counts into one record per subject, ids `<trial>-0001`, ...
pub fn from_cells(trial: TrialId, cells: &[Cell]) -> IpdTrial {
    let mut records = Vec::new();
    for &(black, arm, y, count) in cells {
        for _ in 0..count {
            records.push(SubjectRecord {
                id: format!("{trial}-{:04}", records.len() + 1),
                arm,
                outcome: y as f64,
                covariates: vec![black as f64],
            });
        }
    }
    IpdTrial {
        trial,
        covariates: vec![CovariateSpec::binary("black")],
        declared_n: Some(records.len()),
        records,
        outcome_kind: OutcomeKind::Binary,
        event: EventLevel::ZERO,
    }
}

pub fn example_ac() -> IpdTrial {
    from_cells(TrialId::AC, &EXAMPLE_AC_CELLS)
}

pub fn example_bc() -> IpdTrial {
    from_cells(TrialId::BC, &EXAMPLE_BC_CELLS)
}

pub fn overlap_ac() -> IpdTrial {
    from_cells(TrialId::AC, &OVERLAP_AC_CELLS)
}

pub fn overlap_bc() -> IpdTrial {
    from_cells(TrialId::BC, &OVERLAP_BC_CELLS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::AgdSummary;

    #[test]
    fn bundled_csv_matches_cells() {
        let ac = IpdTrial::read_csv(EXAMPLE_AC_CSV.as_bytes(), None).unwrap();
        let bc = IpdTrial::read_csv(EXAMPLE_BC_CSV.as_bytes(), None).unwrap();
        assert_eq!(ac.records, example_ac().records);
        assert_eq!(bc.records, example_bc().records);
    }

    #[test]
    fn bundled_agd_parses() {
        let ac = AgdSummary::from_json(EXAMPLE_AC_AGD_JSON).unwrap();
        let bc = AgdSummary::from_json(EXAMPLE_BC_AGD_JSON).unwrap();
        assert_eq!(ac.trial, TrialId::AC);
        assert_eq!(bc.trial, TrialId::BC);
    }
}
