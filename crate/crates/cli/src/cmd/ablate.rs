//! `ablate`: train one micro-model per design variant and tabulate the
//! final metrics.
//!
//! Every row shares the seed, step budget, and architecture; only the
//! attention design coordinates vary. Rows are informational output, not a
//! gate: desk-scale runs rank designs noisily.

use crate::settings::{AblateSettings, Axis, Globals};
use crate::Failure;
use flowformer::attention::{AllocationAct, AttentionConfig, CompetitionAct, Phi};
use flowformer::train;
use std::fmt::Write as _;
use std::fs;

/// One point in the swept design space. Default is the published design.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Variant {
    pub phi: Phi,
    pub competition_act: CompetitionAct,
    pub allocation_act: AllocationAct,
    pub competition_enabled: bool,
    pub allocation_enabled: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            phi: Phi::Sigmoid,
            competition_act: CompetitionAct::Softmax,
            allocation_act: AllocationAct::Sigmoid,
            competition_enabled: true,
            allocation_enabled: true,
        }
    }
}

impl Variant {
    /// The three display coordinates; disabled stages show as "off".
    fn columns(&self) -> (String, String, String) {
        let comp = if self.competition_enabled {
            act_name(self.competition_act).to_string()
        } else {
            "off".to_string()
        };
        let alloc = if self.allocation_enabled {
            alloc_name(self.allocation_act).to_string()
        } else {
            "off".to_string()
        };
        (self.phi.name().to_string(), comp, alloc)
    }
}

fn act_name(a: CompetitionAct) -> &'static str {
    match a {
        CompetitionAct::Softmax => "softmax",
        CompetitionAct::Sigmoid => "sigmoid",
    }
}

fn alloc_name(a: AllocationAct) -> &'static str {
    match a {
        AllocationAct::Sigmoid => "sigmoid",
        AllocationAct::Softmax => "softmax",
    }
}

/// Cross-product of the selected axes around the default design. Axes not
/// selected stay pinned at their default coordinate, so the default variant
/// is always one of the rows.
pub fn variant_grid(axes: &[Axis]) -> Vec<Variant> {
    let mut rows = vec![Variant::default()];
    for &axis in axes {
        rows = rows
            .into_iter()
            .flat_map(|row| -> Vec<Variant> {
                match axis {
                    Axis::Phi => [Phi::Sigmoid, Phi::EluPlusOne, Phi::Relu]
                        .into_iter()
                        .map(|phi| Variant { phi, ..row })
                        .collect(),
                    Axis::CompetitionAct => [CompetitionAct::Softmax, CompetitionAct::Sigmoid]
                        .into_iter()
                        .map(|competition_act| Variant { competition_act, ..row })
                        .collect(),
                    Axis::AllocationAct => [AllocationAct::Sigmoid, AllocationAct::Softmax]
                        .into_iter()
                        .map(|allocation_act| Variant { allocation_act, ..row })
                        .collect(),
                    Axis::NoCompetition => [true, false]
                        .into_iter()
                        .map(|competition_enabled| Variant { competition_enabled, ..row })
                        .collect(),
                    Axis::NoAllocation => [true, false]
                        .into_iter()
                        .map(|allocation_enabled| Variant { allocation_enabled, ..row })
                        .collect(),
                }
            })
            .collect();
    }
    rows
}

pub fn run(globals: &Globals, s: &AblateSettings) -> Result<(), Failure> {
    let variants = variant_grid(&s.axes);
    println!(
        "{:<14} {:<12} {:<12} {:>12} {:>10}",
        "phi", "competition", "allocation", "final_loss", "metric"
    );
    let mut csv = String::from("phi,competition,allocation,default,final_loss,metric\n");

    for (i, var) in variants.iter().enumerate() {
        let mut model = s.model.clone();
        model.attention = AttentionConfig {
            phi: var.phi,
            competition_act: var.competition_act,
            allocation_act: var.allocation_act,
            competition_enabled: var.competition_enabled,
            allocation_enabled: var.allocation_enabled,
            ..model.attention
        };
        let dir = globals.out.join("ablate").join(format!("{i:02}"));
        let out = train::train(&model, &s.task, &s.run, &dir)?;
        let last = out.metrics.last().expect("training always evaluates at the last step");

        let (phi, comp, alloc) = var.columns();
        let mark = if *var == Variant::default() { "  *" } else { "" };
        println!(
            "{phi:<14} {comp:<12} {alloc:<12} {:>12.6} {:>10.4}{mark}",
            last.loss, last.metric
        );
        let _ = writeln!(
            csv,
            "{phi},{comp},{alloc},{},{},{}",
            *var == Variant::default(),
            last.loss,
            last.metric
        );
    }
    println!("* default design");

    fs::create_dir_all(&globals.out).map_err(flowformer::error::FlowError::from)?;
    let csv_path = globals.out.join("ablate.csv");
    fs::write(&csv_path, csv).map_err(flowformer::error::FlowError::from)?;
    eprintln!("wrote {}", csv_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_axes_yield_exactly_the_default_row() {
        assert_eq!(variant_grid(&[]), vec![Variant::default()]);
    }

    #[test]
    fn the_full_cross_product_has_forty_eight_distinct_rows() {
        let axes =
            [Axis::Phi, Axis::CompetitionAct, Axis::AllocationAct, Axis::NoCompetition, Axis::NoAllocation];
        let rows = variant_grid(&axes);
        assert_eq!(rows.len(), 3 * 2 * 2 * 2 * 2);
        for (i, a) in rows.iter().enumerate() {
            assert!(rows[i + 1..].iter().all(|b| b != a), "duplicate row {a:?}");
        }
        assert_eq!(rows.iter().filter(|r| **r == Variant::default()).count(), 1);
    }

    #[test]
    fn single_axis_grids_keep_the_other_coordinates_at_default() {
        let rows = variant_grid(&[Axis::Phi]);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.competition_act == CompetitionAct::Softmax
            && r.allocation_act == AllocationAct::Sigmoid
            && r.competition_enabled
            && r.allocation_enabled));
        assert_eq!(rows[0], Variant::default());
    }

    #[test]
    fn disabled_stages_display_as_off() {
        let row = Variant { competition_enabled: false, ..Default::default() };
        let (_, comp, alloc) = row.columns();
        assert_eq!(comp, "off");
        assert_eq!(alloc, "sigmoid");
    }
}
