//! Diagnostic computations over a fitted cohort: per-member entropy and
//! pairwise KL averages, exclusive-correct region counts, parameter-count
//! capacity ratios, and the head on/off ablation grid.

use crate::cohort::Cohort;
use crate::data::Dataset;
use crate::distill::{self, Temperature};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::par;
use crate::train::{train_with_active_members, RunMetrics, TrainConfig};

/// Mean entropy per cohort member and the mean pairwise KL matrix.
///
/// Row index is the target distribution `p`, column index the approximation
/// `q`, matching `kl_divergence(p, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub avg_entropy: Vec<f64>,
    pub kl_matrix: Vec<Vec<f64>>,
}

/// Per-member softened distributions, then averages over the dataset.
pub fn head_stats(cohort: &Cohort, data: &Dataset, tau: Temperature) -> Result<HeadStats> {
    let members = cohort.logits(data.inputs())?;
    let n = data.len();
    let size = members.len();

    // All softened distributions up front: member-major, sample-minor.
    let mut dists = Vec::with_capacity(size);
    for member in &members {
        let member_dists: Vec<Result<distill::Distribution>> =
            par::map_range(n, |i| distill::softmax_t(member.row(i), tau));
        dists.push(member_dists.into_iter().collect::<Result<Vec<_>>>()?);
    }

    let avg_entropy: Vec<f64> = dists
        .iter()
        .map(|member| member.iter().map(distill::entropy).sum::<f64>() / n as f64)
        .collect();

    let mut kl_matrix = vec![vec![0.0; size]; size];
    for p in 0..size {
        for q in 0..size {
            if p == q {
                continue; // KL of a distribution against itself is 0.
            }
            let per_sample: Vec<f64> =
                par::map_range(n, |i| distill::kl_divergence(&dists[p][i], &dists[q][i]));
            kl_matrix[p][q] = per_sample.iter().sum::<f64>() / n as f64;
        }
    }
    Ok(HeadStats { avg_entropy, kl_matrix })
}

/// Counts of samples for every correctness pattern across cohort members.
///
/// Region index is a bitmask: bit `j` set means member `j` (heads in depth
/// order, the teacher's classifier last) classified the sample correctly.
#[derive(Debug, Clone, PartialEq)]
pub struct VennCounts {
    pub members: usize,
    pub region_counts: Vec<u64>,
}

impl VennCounts {
    pub fn total(&self) -> u64 {
        self.region_counts.iter().sum()
    }

    /// Samples only this member got right.
    pub fn exclusive(&self, member: usize) -> u64 {
        self.region_counts[1 << member]
    }

    /// All samples this member got right, across regions.
    pub fn member_correct_total(&self, member: usize) -> u64 {
        self.region_counts
            .iter()
            .enumerate()
            .filter(|(region, _)| region & (1 << member) != 0)
            .map(|(_, &count)| count)
            .sum()
    }
}

/// Builds region counts from a per-member correctness table.
pub fn venn_from_correctness(correct: &[Vec<bool>]) -> Result<VennCounts> {
    let members = correct.len();
    if members == 0 {
        return Err(Error::Contract("venn counts need at least one member".into()));
    }
    if members > 16 {
        return Err(Error::Contract(format!(
            "venn region table for {members} members is too large (limit 16)"
        )));
    }
    let n = correct[0].len();
    if correct.iter().any(|c| c.len() != n) {
        return Err(Error::Contract("ragged correctness table".into()));
    }
    let mut region_counts = vec![0u64; 1 << members];
    for i in 0..n {
        let mut region = 0usize;
        for (j, member) in correct.iter().enumerate() {
            if member[i] {
                region |= 1 << j;
            }
        }
        region_counts[region] += 1;
    }
    Ok(VennCounts { members, region_counts })
}

/// Region counts over a dataset, predictions at temperature 1.
pub fn venn_counts(cohort: &Cohort, data: &Dataset) -> Result<VennCounts> {
    if cohort.size() > 16 {
        return Err(Error::Contract(format!(
            "venn region table for {} members is too large (limit 16)",
            cohort.size()
        )));
    }
    let members = cohort.logits(data.inputs())?;
    let correct: Vec<Vec<bool>> = members
        .iter()
        .map(|logits| {
            par::map_range(data.len(), |i| {
                distill::argmax_logits(logits.row(i)) == data.labels()[i]
            })
        })
        .collect();
    venn_from_correctness(&correct)
}

/// Teacher-to-student parameter-count ratio.
pub fn capacity_ratio(teacher: &Network, student: &Network) -> Result<f64> {
    let s = student.param_count().total;
    if s == 0 {
        return Err(Error::Contract("student has no parameters".into()));
    }
    Ok(teacher.param_count().total as f64 / s as f64)
}

/// On/off switches over cohort members: heads in depth order, then the
/// teacher's own classifier last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationMask {
    bits: Vec<bool>,
}

impl AblationMask {
    pub fn new(bits: Vec<bool>) -> Self {
        AblationMask { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `1`/`0` per member, comma-separated, for table emission.
    pub fn csv_cells(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Parses a compact `0`/`1` string such as `0101`.
    pub fn parse(s: &str) -> Result<Self> {
        let bits: Result<Vec<bool>> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Contract(format!("mask character {other:?} is not 0/1"))),
            })
            .collect();
        Ok(AblationMask::new(bits?))
    }

    /// The full grid of `2^size` masks. Mask `v` sets bit `j` for member `j`
    /// when `(v >> j) & 1 == 1`, so the all-off row comes first and the
    /// all-on row last.
    pub fn full_grid(size: usize) -> Vec<AblationMask> {
        (0..1usize << size)
            .map(|v| AblationMask::new((0..size).map(|j| (v >> j) & 1 == 1).collect()))
            .collect()
    }
}

/// One row of the ablation grid.
#[derive(Debug)]
pub struct AblationRun {
    pub mask: AblationMask,
    pub accuracy: f64,
    pub student: Network,
    pub metrics: RunMetrics,
}

/// Trains a fresh student per mask, each initialized from the config seed,
/// distilling only from the members switched on. The all-off mask
/// degenerates to plain cross-entropy training. Runs are independent and
/// execute in parallel.
pub fn ablation_run(
    cohort: &Cohort,
    student_template: &Network,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
    masks: &[AblationMask],
) -> Result<Vec<AblationRun>> {
    if let Some(bad) = masks.iter().find(|m| m.len() != cohort.size()) {
        return Err(Error::Contract(format!(
            "mask of length {} for a cohort of {}",
            bad.len(),
            cohort.size()
        )));
    }
    let results: Vec<Result<AblationRun>> = par::map_slice(masks, |mask| {
        let student = student_template.clone().init_params(config.seed);
        let (student, metrics) = train_with_active_members(
            student,
            cohort,
            mask.bits(),
            train_data,
            test_data,
            config,
        )?;
        Ok(AblationRun {
            mask: mask.clone(),
            accuracy: metrics.final_test_acc,
            student,
            metrics,
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;

    #[test]
    fn venn_hand_built_stub() {
        // Member A correct on samples {1, 2}; member B on {2, 3}; sample 0
        // missed by both. Exclusive-A = {1}, exclusive-B = {3}, both = {2}.
        let a = vec![false, true, true, false];
        let b = vec![false, false, true, true];
        let venn = venn_from_correctness(&[a, b]).unwrap();
        assert_eq!(venn.total(), 4);
        assert_eq!(venn.exclusive(0), 1);
        assert_eq!(venn.exclusive(1), 1);
        assert_eq!(venn.region_counts[0b11], 1);
        assert_eq!(venn.region_counts[0b00], 1);
        assert_eq!(venn.member_correct_total(0), 2);
        assert_eq!(venn.member_correct_total(1), 2);
    }

    #[test]
    fn venn_identical_members_populate_two_regions() {
        let same = vec![true, false, true, true, false];
        let venn = venn_from_correctness(&[same.clone(), same.clone(), same]).unwrap();
        for (region, &count) in venn.region_counts.iter().enumerate() {
            match region {
                0b000 => assert_eq!(count, 2),
                0b111 => assert_eq!(count, 3),
                _ => assert_eq!(count, 0, "region {region:b}"),
            }
        }
    }

    #[test]
    fn venn_rejects_oversized_cohorts() {
        let correct = vec![vec![true]; 17];
        assert!(matches!(
            venn_from_correctness(&correct),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn capacity_ratio_identical_networks() {
        let net = Network::from_dims(4, &[8, 8], 5, Activation::Relu, false, vec![]).unwrap();
        assert_eq!(capacity_ratio(&net, &net).unwrap(), 1.0);
    }

    #[test]
    fn mask_grid_shape_and_order() {
        let grid = AblationMask::full_grid(4);
        assert_eq!(grid.len(), 16);
        assert_eq!(grid[0].active_count(), 0);
        assert_eq!(grid[15].active_count(), 4);
        // Mask 8 = only the last member (the teacher's classifier).
        assert_eq!(grid[8].bits(), &[false, false, false, true]);
    }

    #[test]
    fn mask_parse_round_trip() {
        let mask = AblationMask::parse("0110").unwrap();
        assert_eq!(mask.bits(), &[false, true, true, false]);
        assert_eq!(mask.csv_cells(), "0,1,1,0");
        assert!(AblationMask::parse("01x1").is_err());
    }
}
