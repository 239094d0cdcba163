//! Branch-free exp for the activation hot path.
//!
//! exp(x) = 2^k * exp(y) with k = round(x/ln2) and y = x - k*ln2 reduced
//! into [-ln2/2, ln2/2], where exp(y) is a degree-12 Taylor polynomial.
//! Relative error stays below ~1e-15, and the code is free of branches so
//! the autovectorizer can run it 4-8 lanes wide. Inputs are assumed finite
//! (tensor ops verify this); magnitudes beyond the representable range
//! saturate to 0 or inf like the libm function.

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931471803691238e-1;
const LN2_LO: f64 = 1.9082149292705877e-10;

/// Taylor coefficients 1/n! for n = 12 down to 2.
const COEFFS: [f64; 11] = [
    2.08767569878681e-9,      // 1/12!
    2.505210838544172e-8,     // 1/11!
    2.7557319223985893e-7,    // 1/10!
    2.755731922398589e-6,     // 1/9!
    2.48015873015873e-5,      // 1/8!
    1.984126984126984e-4,     // 1/7!
    1.3888888888888889e-3,    // 1/6!
    8.333333333333333e-3,     // 1/5!
    4.1666666666666664e-2,    // 1/4!
    1.6666666666666666e-1,    // 1/3!
    5e-1,                     // 1/2!
];

/// Fast exp; see module docs.
#[inline]
pub fn exp_approx(x: f64) -> f64 {
    let kf = (x * LOG2_E).round();
    // clamp the exponent so the bit trick stays in range; the mask below
    // zeroes results that truly underflow
    let kc = kf.max(-1022.0).min(1023.0);
    let y = x - kc * LN2_HI - kc * LN2_LO;
    let mut p = COEFFS[0];
    for &c in &COEFFS[1..] {
        p = p * y + c;
    }
    // exp(y) = 1 + y + y^2*(poly)
    let e = 1.0 + y + y * y * p;
    let scale = f64::from_bits(((kc as i64 + 1023) as u64) << 52);
    let under = if kf < -1022.0 { 0.0 } else { 1.0 };
    let over = if kf > 1023.0 { f64::INFINITY } else { 1.0 };
    e * scale * under * over
}
