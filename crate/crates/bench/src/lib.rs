//! Shared fixtures for the benchmarks.

use pyraflow::config::RunConfig;
use pyraflow::pyramid::Builder;

/// Default run configuration with the given builder; `cascade_times` is only
/// used by `cfg`.
pub fn run_config(builder: Builder, cascade_times: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.pyramid.builder = builder;
    c.pyramid.cascade_times = if builder == Builder::Cfg {
        cascade_times
    } else {
        1
    };
    c
}
