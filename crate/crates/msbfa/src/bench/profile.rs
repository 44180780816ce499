//! Wall-clock and peak-memory accounting around a unit of work.

use std::time::Instant;

/// Resource usage observed around one closure invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceUsage {
    pub seconds: f64,
    /// Peak resident set size of the process in MiB, if the platform
    /// exposes it (Linux: VmHWM in /proc/self/status).
    pub peak_mib: Option<f64>,
}

/// Run `work` and report elapsed wall-clock seconds plus the process
/// peak RSS afterwards. The peak is process-wide and monotone, so for
/// per-cell attribution run cells in separate processes or treat the
/// value as an upper bound.
pub fn profile<T>(work: impl FnOnce() -> T) -> (T, ResourceUsage) {
    let start = Instant::now();
    let out = work();
    let seconds = start.elapsed().as_secs_f64();
    (
        out,
        ResourceUsage {
            seconds,
            peak_mib: peak_rss_mib(),
        },
    )
}

/// Current peak resident set size in MiB, read from /proc/self/status.
pub fn peak_rss_mib() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: f64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb / 1024.0);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noop_is_fast_and_sleep_is_timed() {
        let (_, usage) = profile(|| ());
        assert!(usage.seconds < 0.1, "no-op took {}", usage.seconds);

        let (_, usage) = profile(|| std::thread::sleep(std::time::Duration::from_millis(100)));
        assert!(
            (usage.seconds - 0.1).abs() < 0.05,
            "sleep measured at {}",
            usage.seconds
        );
    }

    #[test]
    fn doubled_work_never_reports_less_time() {
        let spin = |reps: usize| {
            let mut acc = 0.0f64;
            for i in 0..reps {
                acc += std::hint::black_box((i as f64).sqrt().sin());
            }
            std::hint::black_box(acc)
        };
        let (_, once) = profile(|| spin(4_000_000));
        let (_, twice) = profile(|| spin(8_000_000));
        assert!(
            twice.seconds >= once.seconds,
            "2x work reported less time: {} vs {}",
            twice.seconds,
            once.seconds
        );
    }

    #[test]
    fn large_allocation_moves_the_peak() {
        let (sum, usage) = profile(|| {
            // 100 MiB of touched pages.
            let v = vec![1u8; 100 * 1024 * 1024];
            v.iter().map(|&b| b as u64).sum::<u64>()
        });
        assert_eq!(sum, 100 * 1024 * 1024);
        let peak = usage.peak_mib.expect("proc status available on Linux");
        assert!(peak >= 100.0, "peak {peak} MiB below the allocation");
    }
}
