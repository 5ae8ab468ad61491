//! Discretized selective state-space recurrence.
//!
//! The state matrix `A` is diagonal per channel and stored as a
//! `(channels, state_size)` matrix. Per-token parameters `delta`, `B` and `C`
//! are produced from the input by the mamba layer, which is what makes the
//! scan selective. For token `t` and channel `c`:
//!
//! ```text
//! A_bar[t,c,n] = exp(delta[t,c] * A[c,n])
//! B_bar[t,c,n] = delta[t,c] * B[t,n]
//! h[t,c,n]     = A_bar[t,c,n] * h[t-1,c,n] + B_bar[t,c,n] * x[t,c]
//! y[t,c]       = sum_n C[t,n] * h[t,c,n] + D[c] * x[t,c]
//! ```

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("delta must be strictly positive, got {value} at token {token}, channel {channel}")]
    NonPositiveDelta {
        token: usize,
        channel: usize,
        value: f64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Continuous parameters plus the input-dependent per-token projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `(channels, state_size)`, diagonal state matrix per channel.
    pub a: Tensor,
    /// Skip coefficient per channel; `None` drops the `D x` term.
    pub d: Option<Vec<f64>>,
    /// `(tokens, channels)`, strictly positive.
    pub delta: Tensor,
    /// `(tokens, state_size)`.
    pub b: Tensor,
    /// `(tokens, state_size)`.
    pub c: Tensor,
}

impl SsmParams {
    pub fn new(
        a: Tensor,
        d: Option<Vec<f64>>,
        delta: Tensor,
        b: Tensor,
        c: Tensor,
    ) -> Result<Self, SsmError> {
        let params = Self { a, d, delta, b, c };
        params.validate()?;
        Ok(params)
    }

    pub fn channels(&self) -> usize {
        self.a.rows()
    }

    pub fn state_size(&self) -> usize {
        self.a.cols()
    }

    pub fn tokens(&self) -> usize {
        self.delta.rows()
    }

    pub fn validate(&self) -> Result<(), SsmError> {
        let (ch, n) = self.a.shape();
        if n == 0 {
            return Err(SsmError::Shape("state_size must be at least 1".into()));
        }
        let l = self.delta.rows();
        if self.delta.cols() != ch {
            return Err(SsmError::Shape(format!(
                "delta has {} channels, A has {ch}",
                self.delta.cols()
            )));
        }
        if self.b.shape() != (l, n) || self.c.shape() != (l, n) {
            return Err(SsmError::Shape(format!(
                "B {:?} and C {:?} must both be ({l}, {n})",
                self.b.shape(),
                self.c.shape()
            )));
        }
        if let Some(d) = &self.d {
            if d.len() != ch {
                return Err(SsmError::Shape(format!("D has {} entries, expected {ch}", d.len())));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(SsmError::NonFinite("D"));
            }
        }
        for (name, t) in [("A", &self.a), ("B", &self.b), ("C", &self.c)] {
            if !t.is_finite() {
                return Err(SsmError::NonFinite(name));
            }
        }
        check_delta(&self.delta)
    }
}

fn check_delta(delta: &Tensor) -> Result<(), SsmError> {
    for t in 0..delta.rows() {
        for (c, &v) in delta.row(t).iter().enumerate() {
            if v.is_nan() {
                return Err(SsmError::NonFinite("delta"));
            }
            if v <= 0.0 {
                return Err(SsmError::NonPositiveDelta {
                    token: t,
                    channel: c,
                    value: v,
                });
            }
        }
    }
    if !delta.is_finite() {
        return Err(SsmError::NonFinite("delta"));
    }
    Ok(())
}

/// Per-token discrete transition and input matrices, indexed `(token, channel, state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteParams {
    tokens: usize,
    channels: usize,
    state_size: usize,
    a_bar: Vec<f64>,
    b_bar: Vec<f64>,
}

impl DiscreteParams {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    fn block(&self, buf: &[f64], t: usize) -> Tensor {
        let size = self.channels * self.state_size;
        Tensor::from_vec(
            self.channels,
            self.state_size,
            buf[t * size..(t + 1) * size].to_vec(),
        )
    }

    /// `(channels, state_size)` transition for token `t`.
    pub fn a_bar(&self, t: usize) -> Tensor {
        self.block(&self.a_bar, t)
    }

    /// `(channels, state_size)` input matrix for token `t`.
    pub fn b_bar(&self, t: usize) -> Tensor {
        self.block(&self.b_bar, t)
    }

    pub fn a_bar_values(&self) -> &[f64] {
        &self.a_bar
    }

    pub fn b_bar_values(&self) -> &[f64] {
        &self.b_bar
    }
}

/// Recurrent state carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    /// `(channels, state_size)`.
    pub h: Tensor,
    /// Frame at which this state was last committed.
    pub frame_index: usize,
}

impl HiddenState {
    pub fn zeros(channels: usize, state_size: usize) -> Self {
        Self {
            h: Tensor::zeros(channels, state_size),
            frame_index: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.h.rows()
    }

    pub fn state_size(&self) -> usize {
        self.h.cols()
    }
}

/// Zero-order-hold transition with the first-order input approximation
/// `B_bar = delta * B`.
pub fn discretize(delta: &Tensor, a: &Tensor, b_in: &Tensor) -> Result<DiscreteParams, SsmError> {
    let (tokens, channels) = delta.shape();
    let state_size = a.cols();
    if a.rows() != channels {
        return Err(SsmError::Shape(format!(
            "A has {} channels, delta has {channels}",
            a.rows()
        )));
    }
    if b_in.shape() != (tokens, state_size) {
        return Err(SsmError::Shape(format!(
            "B {:?} must be ({tokens}, {state_size})",
            b_in.shape()
        )));
    }
    if !a.is_finite() {
        return Err(SsmError::NonFinite("A"));
    }
    if !b_in.is_finite() {
        return Err(SsmError::NonFinite("B"));
    }
    check_delta(delta)?;
    let size = tokens * channels * state_size;
    let mut a_bar = Vec::with_capacity(size);
    let mut b_bar = Vec::with_capacity(size);
    for t in 0..tokens {
        for c in 0..channels {
            let dt = delta.get(t, c);
            for n in 0..state_size {
                a_bar.push((dt * a.get(c, n)).exp());
                b_bar.push(dt * b_in.get(t, n));
            }
        }
    }
    Ok(DiscreteParams {
        tokens,
        channels,
        state_size,
        a_bar,
        b_bar,
    })
}

/// One recurrence step: returns `(h_t, y_t)`.
pub fn ssm_step(
    h_prev: &Tensor,
    x_t: &[f64],
    a_bar: &Tensor,
    b_bar: &Tensor,
    c_t: &[f64],
    d: Option<&[f64]>,
) -> Result<(Tensor, Vec<f64>), SsmError> {
    let (channels, state_size) = h_prev.shape();
    if a_bar.shape() != (channels, state_size) || b_bar.shape() != (channels, state_size) {
        return Err(SsmError::Shape(format!(
            "discrete params {:?}/{:?} do not match state ({channels}, {state_size})",
            a_bar.shape(),
            b_bar.shape()
        )));
    }
    if x_t.len() != channels || c_t.len() != state_size || d.is_some_and(|d| d.len() != channels) {
        return Err(SsmError::Shape("step input lengths inconsistent with state".into()));
    }
    if !h_prev.is_finite() {
        return Err(SsmError::NonFinite("hidden state"));
    }
    let mut h = Tensor::zeros(channels, state_size);
    let mut y = vec![0.0; channels];
    for c in 0..channels {
        let mut acc = 0.0;
        for n in 0..state_size {
            let v = a_bar.get(c, n) * h_prev.get(c, n) + b_bar.get(c, n) * x_t[c];
            h.set(c, n, v);
            acc += c_t[n] * v;
        }
        y[c] = acc + d.map_or(0.0, |d| d[c] * x_t[c]);
    }
    Ok((h, y))
}

/// Runs the recurrence over `x_seq` `(tokens, channels)` starting from `h_init`.
///
/// Returns the per-token outputs and the state after the last token. An empty
/// sequence returns an empty output and `h_init` unchanged.
pub fn selective_scan(
    x_seq: &Tensor,
    params: &SsmParams,
    h_init: &HiddenState,
) -> Result<(Tensor, HiddenState), SsmError> {
    params.validate()?;
    let (tokens, channels) = x_seq.shape();
    if tokens != params.tokens() || channels != params.channels() {
        return Err(SsmError::Shape(format!(
            "input {:?} does not match params ({}, {})",
            x_seq.shape(),
            params.tokens(),
            params.channels()
        )));
    }
    if h_init.h.shape() != params.a.shape() {
        return Err(SsmError::Shape(format!(
            "initial state {:?} does not match A {:?}",
            h_init.h.shape(),
            params.a.shape()
        )));
    }
    if !x_seq.is_finite() {
        return Err(SsmError::NonFinite("input"));
    }
    if !h_init.h.is_finite() {
        return Err(SsmError::NonFinite("hidden state"));
    }
    let out = scan_forward(
        x_seq,
        &params.delta,
        &params.a,
        &params.b,
        &params.c,
        params.d.as_deref(),
        &h_init.h,
        false,
    );
    Ok((
        out.y,
        HiddenState {
            h: out.h_final,
            frame_index: h_init.frame_index,
        },
    ))
}

pub(crate) struct ScanOutput {
    pub y: Tensor,
    pub h_final: Tensor,
    /// Every intermediate state, `(tokens, channels, state)` flattened; empty
    /// unless requested.
    pub states: Vec<f64>,
}

/// Fused sequential scan. Shapes are assumed validated by the caller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: Option<&[f64]>,
    h0: &Tensor,
    keep_states: bool,
) -> ScanOutput {
    let (tokens, channels) = u.shape();
    let n_state = a.cols();
    let mut h = h0.data().to_vec();
    let mut y = Tensor::zeros(tokens, channels);
    let mut states = if keep_states {
        Vec::with_capacity(tokens * channels * n_state)
    } else {
        Vec::new()
    };
    for t in 0..tokens {
        let b_t = b.row(t);
        let c_t = c.row(t);
        let u_t = u.row(t);
        let dt_t = delta.row(t);
        let y_t = y.row_mut(t);
        for ch in 0..channels {
            let dt = dt_t[ch];
            let x = u_t[ch];
            let a_row = a.row(ch);
            let h_row = &mut h[ch * n_state..(ch + 1) * n_state];
            let mut acc = 0.0;
            for n in 0..n_state {
                let v = (dt * a_row[n]).exp() * h_row[n] + (dt * b_t[n]) * x;
                h_row[n] = v;
                acc += c_t[n] * v;
            }
            y_t[ch] = acc + d.map_or(0.0, |d| d[ch] * x);
        }
        if keep_states {
            states.extend_from_slice(&h);
        }
    }
    ScanOutput {
        y,
        h_final: Tensor::from_vec(channels, n_state, h),
        states,
    }
}

pub(crate) struct ScanGrads {
    pub u: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Option<Tensor>,
    pub h0: Tensor,
}

/// Reverse pass of [`scan_forward`] given the stored intermediate states.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: Option<&[f64]>,
    h0: &Tensor,
    states: &[f64],
    grad_y: &Tensor,
    grad_h_final: Option<&Tensor>,
) -> ScanGrads {
    let (tokens, channels) = u.shape();
    let n_state = a.cols();
    let block = channels * n_state;
    let mut gh = match grad_h_final {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; block],
    };
    let mut gu = Tensor::zeros(tokens, channels);
    let mut gdelta = Tensor::zeros(tokens, channels);
    let mut ga = Tensor::zeros(channels, n_state);
    let mut gb = Tensor::zeros(tokens, n_state);
    let mut gc = Tensor::zeros(tokens, n_state);
    let mut gd = d.map(|_| Tensor::zeros(1, channels));
    for t in (0..tokens).rev() {
        let h_t = &states[t * block..(t + 1) * block];
        let h_prev: &[f64] = if t == 0 {
            h0.data()
        } else {
            &states[(t - 1) * block..t * block]
        };
        for ch in 0..channels {
            let dt = delta.get(t, ch);
            let x = u.get(t, ch);
            let gy = grad_y.get(t, ch);
            let mut gu_acc = 0.0;
            let mut gdt_acc = 0.0;
            if let (Some(d), Some(gd)) = (d, gd.as_mut()) {
                gd.data_mut()[ch] += gy * x;
                gu_acc += gy * d[ch];
            }
            for n in 0..n_state {
                let idx = ch * n_state + n;
                let a_cn = a.get(ch, n);
                let c_tn = c.get(t, n);
                let b_tn = b.get(t, n);
                let g = gh[idx] + gy * c_tn;
                gc.data_mut()[t * n_state + n] += gy * h_t[idx];
                let a_bar = (dt * a_cn).exp();
                let g_abar = g * h_prev[idx];
                gdt_acc += g_abar * a_bar * a_cn + g * b_tn * x;
                ga.data_mut()[idx] += g_abar * a_bar * dt;
                gb.data_mut()[t * n_state + n] += g * dt * x;
                gu_acc += g * dt * b_tn;
                gh[idx] = g * a_bar;
            }
            gu.set(t, ch, gu_acc);
            gdelta.set(t, ch, gdt_acc);
        }
    }
    ScanGrads {
        u: gu,
        delta: gdelta,
        a: ga,
        b: gb,
        c: gc,
        d: gd,
        h0: Tensor::from_vec(channels, n_state, gh),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_params(a: f64, delta: Vec<f64>, b: f64, c: f64, d: Option<f64>) -> SsmParams {
        let l = delta.len();
        SsmParams::new(
            Tensor::scalar(a),
            d.map(|d| vec![d]),
            Tensor::from_vec(l, 1, delta),
            Tensor::filled(l, 1, b),
            Tensor::filled(l, 1, c),
        )
        .unwrap()
    }

    #[test]
    fn discretize_input_matrix_is_delta_times_b() {
        let dp = discretize(&Tensor::scalar(0.1), &Tensor::scalar(-1.0), &Tensor::scalar(1.0)).unwrap();
        assert_abs_diff_eq!(dp.b_bar(0).get(0, 0), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn discretize_zero_a_is_identity_transition() {
        for delta in [1e-3, 0.5, 7.0] {
            let dp = discretize(&Tensor::scalar(delta), &Tensor::scalar(0.0), &Tensor::scalar(2.0)).unwrap();
            assert_eq!(dp.a_bar(0).get(0, 0), 1.0);
        }
    }

    #[test]
    fn discretize_scalar_exponential() {
        let dp = discretize(&Tensor::scalar(0.5), &Tensor::scalar(-2.0), &Tensor::scalar(1.0)).unwrap();
        assert_abs_diff_eq!(dp.a_bar(0).get(0, 0), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(dp.a_bar(0).get(0, 0), 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn discretize_rejects_bad_delta() {
        let a = Tensor::scalar(-1.0);
        let b = Tensor::scalar(1.0);
        assert!(matches!(
            discretize(&Tensor::scalar(0.0), &a, &b),
            Err(SsmError::NonPositiveDelta { .. })
        ));
        assert!(matches!(
            discretize(&Tensor::scalar(-0.2), &a, &b),
            Err(SsmError::NonPositiveDelta { .. })
        ));
        assert!(matches!(
            discretize(&Tensor::scalar(f64::NAN), &a, &b),
            Err(SsmError::NonFinite(_))
        ));
        assert!(matches!(
            discretize(&Tensor::scalar(0.1), &Tensor::scalar(f64::NAN), &b),
            Err(SsmError::NonFinite(_))
        ));
    }

    #[test]
    fn discretize_small_delta_limit() {
        let a = Tensor::from_rows(&[vec![-1.0, -4.0, -16.0]]);
        let b = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]);
        let mut prev_a: Option<Vec<f64>> = None;
        let mut prev_b: Option<Vec<f64>> = None;
        for delta in [1e-1, 1e-3, 1e-5, 1e-8] {
            let dp = discretize(&Tensor::scalar(delta), &a, &b).unwrap();
            let ab = dp.a_bar_values().to_vec();
            let bb = dp.b_bar_values().to_vec();
            if let (Some(pa), Some(pb)) = (&prev_a, &prev_b) {
                for i in 0..3 {
                    assert!((ab[i] - 1.0).abs() <= (pa[i] - 1.0).abs());
                    assert!(bb[i].abs() <= pb[i].abs());
                }
            }
            if delta == 1e-8 {
                assert!(ab.iter().zip(a.data()).all(|(v, ai)| (v - 1.0).abs() <= 2.0 * delta * ai.abs()));
            }
            prev_a = Some(ab);
            prev_b = Some(bb);
        }
    }

    #[test]
    fn negative_a_gives_contracting_transition() {
        let a = Tensor::from_fn(3, 4, |_, n| -((n + 1) as f64));
        let delta = Tensor::from_fn(5, 3, |t, c| 0.01 + 0.3 * (t + c) as f64);
        let dp = discretize(&delta, &a, &Tensor::zeros(5, 4)).unwrap();
        assert!(dp.a_bar_values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn step_zero_case() {
        let h = Tensor::zeros(2, 3);
        let ab = Tensor::filled(2, 3, 0.9);
        let bb = Tensor::filled(2, 3, 0.4);
        let (h1, y) = ssm_step(&h, &[0.0, 0.0], &ab, &bb, &[1.0, 2.0, 3.0], Some(&[1.0, 1.0])).unwrap();
        assert_eq!(h1, Tensor::zeros(2, 3));
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn step_hand_evaluation() {
        let (h, y) = ssm_step(
            &Tensor::zeros(1, 1),
            &[2.0],
            &Tensor::scalar(0.5),
            &Tensor::scalar(0.5),
            &[1.0],
            Some(&[1.0]),
        )
        .unwrap();
        assert_eq!(h.get(0, 0), 1.0);
        assert_eq!(y, vec![3.0]);
    }

    #[test]
    fn step_identity_transition_holds_state() {
        let h_prev = Tensor::from_rows(&[vec![0.3, -1.2], vec![4.0, 0.5]]);
        let (h, _) = ssm_step(
            &h_prev,
            &[5.0, -3.0],
            &Tensor::filled(2, 2, 1.0),
            &Tensor::zeros(2, 2),
            &[1.0, 1.0],
            None,
        )
        .unwrap();
        assert_eq!(h, h_prev);
    }

    #[test]
    fn step_shape_mismatch_is_error() {
        let r = ssm_step(
            &Tensor::zeros(2, 2),
            &[1.0],
            &Tensor::zeros(2, 2),
            &Tensor::zeros(2, 2),
            &[1.0, 1.0],
            None,
        );
        assert!(matches!(r, Err(SsmError::Shape(_))));
    }

    #[test]
    fn scan_zero_case() {
        let p = SsmParams::new(
            Tensor::from_fn(3, 4, |_, n| -((n + 1) as f64)),
            Some(vec![1.0; 3]),
            Tensor::filled(6, 3, 0.1),
            Tensor::filled(6, 4, 0.7),
            Tensor::filled(6, 4, -0.2),
        )
        .unwrap();
        let (y, h) = selective_scan(&Tensor::zeros(6, 3), &p, &HiddenState::zeros(3, 4)).unwrap();
        assert_eq!(y, Tensor::zeros(6, 3));
        assert_eq!(h.h, Tensor::zeros(3, 4));
    }

    #[test]
    fn scan_hand_unrolled_impulse() {
        // A_bar = 0.5 and B_bar = 1 with delta = 1, A = ln 0.5, B = 1.
        let p = scalar_params(0.5f64.ln(), vec![1.0; 3], 1.0, 1.0, Some(0.0));
        let x = Tensor::from_vec(3, 1, vec![1.0, 0.0, 0.0]);
        let (y, h) = selective_scan(&x, &p, &HiddenState::zeros(1, 1)).unwrap();
        assert_abs_diff_eq!(y.get(0, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y.get(1, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(y.get(2, 0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(h.h.get(0, 0), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn scan_empty_sequence_returns_initial_state() {
        let p = SsmParams::new(
            Tensor::filled(2, 3, -1.0),
            None,
            Tensor::zeros(0, 2),
            Tensor::zeros(0, 3),
            Tensor::zeros(0, 3),
        )
        .unwrap();
        let h0 = HiddenState {
            h: Tensor::filled(2, 3, 0.25),
            frame_index: 4,
        };
        let (y, h) = selective_scan(&Tensor::zeros(0, 2), &p, &h0).unwrap();
        assert_eq!(y.shape(), (0, 2));
        assert_eq!(h, h0);
    }

    #[test]
    fn scan_rejects_mismatched_state() {
        let p = scalar_params(-1.0, vec![0.1; 2], 1.0, 1.0, None);
        let r = selective_scan(&Tensor::zeros(2, 1), &p, &HiddenState::zeros(1, 2));
        assert!(matches!(r, Err(SsmError::Shape(_))));
    }
}
