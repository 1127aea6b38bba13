use half::f16;

use super::Tensor;

/// Largest finite binary16 value.
pub const F16_MAX: f32 = 65504.0;

/// Rounds one value through IEEE 754 binary16 (round-to-nearest-even).
///
/// Values that overflow to infinity saturate at `±65504`; NaN stays NaN.
#[inline]
pub fn round_f16(v: f32) -> f32 {
    let r = f16::from_f32(v).to_f32();
    if r.is_infinite() {
        F16_MAX.copysign(r)
    } else {
        r
    }
}

/// Converts every element to binary16 and back.
pub fn cast_f16_roundtrip(t: &Tensor) -> Tensor {
    t.map(round_f16)
}

pub(crate) fn round_slice_f16(values: &mut [f32]) {
    values.iter_mut().for_each(|v| *v = round_f16(*v));
}
