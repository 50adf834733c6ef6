use serde::Serialize;

use super::{AnalysisError, ShotSet};

/// Pairwise Pearson coefficients between sites; `None` marks pairs involving
/// a zero-variance site.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub size: usize,
    pub values: Vec<Option<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size + j]
    }

    /// Largest defined off-diagonal magnitude.
    pub fn max_off_diagonal(&self) -> Option<f64> {
        (0..self.size)
            .flat_map(|i| (0..self.size).filter(move |&j| j != i).map(move |j| (i, j)))
            .filter_map(|(i, j)| self.get(i, j))
            .map(f64::abs)
            .reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|j| self.get(i, j).map_or_else(|| "nan".to_string(), |v| format!("{v:.12}")))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn pearson_matrix(shots: &ShotSet) -> Result<CorrelationMatrix, AnalysisError> {
    shots.validate()?;
    let n = shots.scores.len();
    if n < 2 {
        return Err(AnalysisError::TooFewSamples { needed: 2, got: n });
    }
    let size = shots.sites.len();
    let columns: Vec<Vec<f64>> = (0..size).map(|s| shots.column(s)).collect();
    let centered: Vec<Option<(Vec<f64>, f64)>> = columns
        .iter()
        .map(|c| {
            let m = crate::stats::mean(c);
            let d: Vec<f64> = c.iter().map(|v| v - m).collect();
            let ss = d.iter().map(|v| v * v).sum::<f64>();
            (ss > 0.0).then(|| (d, ss.sqrt()))
        })
        .collect();
    let mut values = vec![None; size * size];
    for i in 0..size {
        for j in i..size {
            let v = match (&centered[i], &centered[j]) {
                (Some(_), Some(_)) if i == j => Some(1.0),
                (Some((a, na)), Some((b, nb))) => {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    Some((dot / (na * nb)).clamp(-1.0, 1.0))
                }
                _ => None,
            };
            values[i * size + j] = v;
            values[j * size + i] = v;
        }
    }
    Ok(CorrelationMatrix { size, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::SiteInfo;
    use crate::rng::substream;
    use rand_distr::{Distribution, Normal};

    fn set(scores: Vec<Vec<f64>>) -> ShotSet {
        let sites = (0..scores[0].len()).map(|c| SiteInfo { cavity: c, port: None }).collect();
        ShotSet { sites, scores }
    }

    #[test]
    fn self_and_negated() {
        let s = set((0..10).map(|i| vec![i as f64, -(i as f64), (i * i) as f64]).collect());
        let m = pearson_matrix(&s).unwrap();
        assert_eq!(m.get(0, 0), Some(1.0));
        assert!((m.get(0, 1).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m.get(0, 2), m.get(2, 0));
    }

    #[test]
    fn zero_variance_flagged() {
        let s = set((0..10).map(|i| vec![i as f64, 3.0]).collect());
        let m = pearson_matrix(&s).unwrap();
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.get(1, 1), None);
        assert_eq!(m.get(0, 0), Some(1.0));
        assert!(m.to_csv().contains("nan"));
    }

    #[test]
    fn independent_channels_at_sampling_noise() {
        let mut r = substream(5, 0, 0);
        let n = Normal::new(0.0, 1.0).unwrap();
        let s = set((0..2000).map(|_| (0..8).map(|_| n.sample(&mut r)).collect()).collect());
        let m = pearson_matrix(&s).unwrap();
        let max = m.max_off_diagonal().unwrap();
        assert!(max < 4.0 / 2000f64.sqrt(), "{max}");
    }

    #[test]
    fn needs_two_shots() {
        assert!(pearson_matrix(&set(vec![vec![1.0, 2.0]])).is_err());
    }
}
