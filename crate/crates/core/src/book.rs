// The guide's Rust snippets, compiled and run as doctests so the book cannot
// drift from the code. One module per chapter to locate failures.

#[doc = include_str!("../../../book/src/flow.md")]
mod flow {}
#[doc = include_str!("../../../book/src/heatmaps.md")]
mod heatmaps {}
#[doc = include_str!("../../../book/src/losses.md")]
mod losses {}
#[doc = include_str!("../../../book/src/metrics.md")]
mod metrics {}
#[doc = include_str!("../../../book/src/configuration.md")]
mod configuration {}
