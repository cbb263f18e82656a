//! Per-QP injection-rate state driven by congestion notifications.

use num_traits::Float;

/// Multiplicative-decrease rate factor with timer-based recovery.
///
/// The factor only drops on a congestion notification and only rises through
/// [`RateControl::advance`], one recovery step per elapsed period, capped at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateControl<F> {
    factor: F,
    decrease: F,
    recovery: F,
    period: Option<u64>,
    anchor: u64,
}

impl<F: Float> RateControl<F> {
    pub fn new(decrease: F, recovery: F, period: Option<u64>) -> Self {
        RateControl {
            factor: F::one(),
            decrease,
            recovery,
            period,
            anchor: 0,
        }
    }

    pub fn factor(&self) -> F {
        self.factor
    }

    /// Applies any recovery steps owed up to `now`.
    pub fn advance(&mut self, now: u64) {
        let Some(period) = self.period else {
            return;
        };
        if now <= self.anchor || period == 0 {
            return;
        }
        let steps = (now - self.anchor) / period;
        if steps == 0 {
            return;
        }
        self.anchor += steps * period;
        for _ in 0..steps {
            if self.factor >= F::one() {
                break;
            }
            self.factor = (self.factor * self.recovery).min(F::one());
        }
    }

    pub fn on_cnp(&mut self, now: u64) {
        self.advance(now);
        self.factor = self.factor * self.decrease;
        self.anchor = now;
    }

    /// Inter-packet gap in ticks at the current rate (one tick at full rate).
    pub fn gap(&self) -> u64 {
        let g = (F::one() / self.factor).ceil();
        g.to_u64().unwrap_or(u64::MAX).max(1)
    }
}
