use rand::Rng;

use crate::demos::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::{positional_tokens, BoxExtents, Pose, TokenScale};
use crate::model::{ActionVector, Window, ACTION_GRIPPER_COL, POSE_DIM};

/// A `T_s`-long piece of a demonstration. Rows past the end of a short demo
/// repeat its terminal state with a null action and are flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub start: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub valid: Vec<bool>,
}

impl Slice {
    pub fn valid_len(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Window with the first `t_p` rows visible.
    pub fn window(&self, t_p: usize) -> Result<Window> {
        Window::from_rows(
            self.states.len(),
            t_p,
            &self.states,
            &self.actions,
            &self.tokens,
        )
    }
}

/// Identity target keeping the last gripper command.
fn null_action(last: &[f64]) -> Vec<f64> {
    let mut a = ActionVector::HOLD.to_vec();
    a[ACTION_GRIPPER_COL] = last[ACTION_GRIPPER_COL];
    a
}

/// Uniformly placed contiguous slice of `seq_len` steps with tokens re-zeroed
/// at the slice start.
pub fn sample_subsequence(
    demo: &Trajectory,
    seq_len: usize,
    extents: &BoxExtents,
    scale: &TokenScale,
    rng: &mut impl Rng,
) -> Result<Slice> {
    let n = demo.len();
    if n == 0 {
        return Err(Error::InvalidInput(format!(
            "{} seed {}: empty demonstration",
            demo.task, demo.seed
        )));
    }
    let start = if n > seq_len {
        rng.random_range(0..=n - seq_len)
    } else {
        0
    };
    slice_at(demo, start, seq_len, extents, scale)
}

pub fn slice_at(
    demo: &Trajectory,
    start: usize,
    seq_len: usize,
    extents: &BoxExtents,
    scale: &TokenScale,
) -> Result<Slice> {
    let n = demo.len();
    if start >= n {
        return Err(Error::InvalidInput(format!(
            "slice start {start} beyond demo length {n}"
        )));
    }
    let end = (start + seq_len).min(n);
    let mut states = demo.states[start..end].to_vec();
    let mut actions = demo.actions[start..end].to_vec();
    let mut valid = vec![true; states.len()];
    let last_s = states.last().cloned().expect("non-empty");
    let pad = null_action(actions.last().expect("non-empty"));
    while states.len() < seq_len {
        states.push(last_s.clone());
        actions.push(pad.clone());
        valid.push(false);
    }
    let path: Vec<Pose> = states
        .iter()
        .map(|s| Pose::from_slice(&s[..POSE_DIM]))
        .collect();
    let tokens = positional_tokens(&path, extents, scale)?;
    Ok(Slice {
        start,
        states,
        actions,
        tokens,
        valid,
    })
}

/// Context length drawn uniformly from `[1, t_p_max]`.
pub fn sample_tp(rng: &mut impl Rng, t_p_max: usize) -> usize {
    rng.random_range(1..=t_p_max.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TaskId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo(len: usize) -> Trajectory {
        let states = (0..len)
            .map(|t| {
                let mut s = vec![0.0; 8 + 14];
                s[0] = 0.01 * t as f64;
                s[3] = 1.0;
                s[7] = 1.0;
                s
            })
            .collect();
        let actions = (0..len)
            .map(|t| {
                let mut a = ActionVector::HOLD.to_vec();
                a[0] = 0.01;
                a[7] = (t % 2) as f64;
                a
            })
            .collect();
        Trajectory {
            task: TaskId::AStack,
            seed: 0,
            j_max: 2,
            dt: 1.0 / 15.0,
            states,
            actions,
            success: true,
        }
    }

    fn sample(d: &Trajectory, seq: usize, rng: &mut ChaCha8Rng) -> Slice {
        sample_subsequence(d, seq, &BoxExtents::default(), &TokenScale::default(), rng).unwrap()
    }

    /// Upper 1% point of chi-square with `df` degrees of freedom
    /// (Wilson-Hilferty approximation).
    pub(crate) fn chi2_crit_01(df: usize) -> f64 {
        let k = df as f64;
        let z = 2.326_347_874;
        k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
    }

    fn chi2(counts: &[usize], n: usize) -> f64 {
        let e = n as f64 / counts.len() as f64;
        counts.iter().map(|c| (*c as f64 - e).powi(2) / e).sum()
    }

    #[test]
    fn one_extra_step_gives_two_starts() {
        let d = demo(11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 2];
        for _ in 0..100 {
            let s = sample(&d, 10, &mut rng);
            assert!(s.start <= 1);
            seen[s.start] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn short_demo_is_padded_and_flagged() {
        let d = demo(6);
        let s = sample(&d, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.start, 0);
        assert_eq!(s.valid_len(), 6);
        assert!(s.valid[..6].iter().all(|v| *v) && s.valid[6..].iter().all(|v| !*v));
        assert_eq!(s.states[9], d.states[5]);
        assert_eq!(&s.actions[7][..7], &ActionVector::HOLD.to_vec()[..7]);
        assert_eq!(s.actions[7][7], d.actions[5][7]);
        assert!(s.tokens[6..].iter().all(|t| *t == s.tokens[5]));
    }

    #[test]
    fn tokens_restart_at_slice_start() {
        let d = demo(40);
        let s = slice_at(&d, 12, 10, &BoxExtents::default(), &TokenScale::default()).unwrap();
        assert_eq!(s.tokens[0], 0);
        // 8 corners x 0.01 m per step, bins of 0.01 m.
        for (t, n) in s.tokens.iter().enumerate() {
            let exact = (0.08 * t as f64 / 0.01).floor() as usize;
            assert!(*n == exact || *n + 1 == exact, "{t}: {n} vs {exact}");
        }
    }

    #[test]
    fn starts_are_uniform() {
        let d = demo(30);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = vec![0usize; 21];
        let n = 10_000;
        for _ in 0..n {
            counts[sample(&d, 10, &mut rng).start] += 1;
        }
        assert!(chi2(&counts, n) < chi2_crit_01(counts.len() - 1));
    }

    #[test]
    fn tp_bounds_and_uniformity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let t = sample_tp(&mut rng, 350);
            assert!((1..=350).contains(&t));
            assert!(400 - t >= 50);
        }
        assert!((0..100).all(|_| sample_tp(&mut rng, 1) == 1));
        let mut counts = vec![0usize; 25];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_tp(&mut rng, 25) - 1] += 1;
        }
        assert!(chi2(&counts, n) < chi2_crit_01(24));
    }

    #[test]
    fn chi2_critical_values() {
        // Tabulated upper 1% points.
        assert!((chi2_crit_01(20) - 37.566).abs() < 0.1);
        assert!((chi2_crit_01(24) - 42.980).abs() < 0.1);
    }

    #[test]
    fn empty_demo_is_rejected() {
        let d = demo(0);
        let r = sample_subsequence(
            &d,
            5,
            &BoxExtents::default(),
            &TokenScale::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(r.is_err());
    }
}
