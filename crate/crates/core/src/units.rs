//! Integer unit helpers. Memory is bytes, time is microseconds.

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;

/// Microseconds needed to move `bytes` at `bandwidth` bytes per second,
/// rounded up. Zero bytes cost nothing.
pub fn transfer_time_us(bytes: u64, bandwidth_bps: u64) -> u64 {
    if bytes == 0 {
        return 0;
    }
    assert!(bandwidth_bps > 0, "bandwidth must be positive");
    let num = bytes as u128 * 1_000_000u128;
    let bw = bandwidth_bps as u128;
    num.div_ceil(bw).min(u64::MAX as u128) as u64
}
