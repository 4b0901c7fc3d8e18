pub mod arm;
pub mod darkzone;

pub(crate) fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid maps to [-pi, pi); flip the lower end so the range is (-pi, pi].
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}
