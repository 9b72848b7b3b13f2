//! Multiply-accumulate accounting.
//!
//! Convolutions report their MAC count to every open [`count_macs`] frame on
//! the current thread. [`section`] labels the work done inside it so a frame
//! can be broken down per module. FLOPs are always reported as `2 * MACs`.

use std::cell::RefCell;
use std::fmt;

use serde::Serialize;

thread_local! {
    static FRAMES: RefCell<Vec<MacTally>> = const { RefCell::new(Vec::new()) };
    static SECTIONS: RefCell<Vec<String>> = const { RefCell::new(Vec::new()) };
    static MULTIPLIES: RefCell<Option<u64>> = const { RefCell::new(None) };
}

/// MACs recorded during one [`count_macs`] call, keyed by `/`-joined section path.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacTally {
    entries: Vec<(String, u64)>,
}

impl MacTally {
    fn add(&mut self, key: &str, macs: u64) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v += macs,
            None => self.entries.push((key.to_string(), macs)),
        }
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, v)| v).sum()
    }

    /// MACs recorded under `name` or any of its sub-sections.
    pub fn under(&self, name: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(k, _)| k == name || k.strip_prefix(name).is_some_and(|r| r.starts_with('/')))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }
}

/// Runs `f` with a fresh MAC frame and returns what it recorded.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, MacTally) {
    FRAMES.with(|fr| fr.borrow_mut().push(MacTally::default()));
    let out = f();
    let tally = FRAMES.with(|fr| fr.borrow_mut().pop()).unwrap_or_default();
    (out, tally)
}

/// Attributes MACs recorded inside `f` to the section `name`.
pub fn section<R>(name: &str, f: impl FnOnce() -> R) -> R {
    SECTIONS.with(|s| s.borrow_mut().push(name.to_string()));
    let out = f();
    SECTIONS.with(|s| s.borrow_mut().pop());
    out
}

pub fn record_macs(macs: u64) {
    FRAMES.with(|fr| {
        let mut frames = fr.borrow_mut();
        if frames.is_empty() {
            return;
        }
        let key = SECTIONS.with(|s| s.borrow().join("/"));
        for frame in frames.iter_mut() {
            frame.add(&key, macs);
        }
    });
}

/// Runs `f` with every convolution on this thread evaluated by the naive
/// reference kernel, returning the number of multiplies it literally executed.
pub fn count_multiplies<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = MULTIPLIES.with(|m| m.borrow_mut().replace(0));
    let out = f();
    let n = MULTIPLIES
        .with(|m| std::mem::replace(&mut *m.borrow_mut(), outer))
        .unwrap_or(0);
    (out, n)
}

pub(crate) fn instrumented() -> bool {
    MULTIPLIES.with(|m| m.borrow().is_some())
}

pub(crate) fn record_multiplies(n: u64) {
    MULTIPLIES.with(|m| {
        if let Some(total) = m.borrow_mut().as_mut() {
            *total += n;
        }
    });
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleProfile {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Parameter and FLOP counts per top-level module. `flops = 2 * MACs`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProfileReport {
    pub input_size: usize,
    pub form: String,
    pub modules: Vec<ModuleProfile>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl ProfileReport {
    pub fn new(input_size: usize, form: impl Into<String>, modules: Vec<ModuleProfile>) -> Self {
        let total_params = modules.iter().map(|m| m.params).sum();
        let total_flops = modules.iter().map(|m| m.flops).sum();
        ProfileReport {
            input_size,
            form: form.into(),
            modules,
            total_params,
            total_flops,
        }
    }

    pub fn module(&self, name: &str) -> Option<&ModuleProfile> {
        self.modules.iter().find(|m| m.name == name)
    }
}

impl fmt::Display for ProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "profile: input {0}x{0}, form {1}, FLOPs = 2 x MACs",
            self.input_size, self.form
        )?;
        writeln!(f, "{:<12} {:>12} {:>16}", "module", "params", "FLOPs")?;
        for m in &self.modules {
            writeln!(f, "{:<12} {:>12} {:>16}", m.name, m.params, m.flops)?;
        }
        writeln!(f, "{:<12} {:>12} {:>16}", "total", self.total_params, self.total_flops)?;
        write!(
            f,
            "total: {:.3} M params, {:.3} GFLOPs",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_recorded_without_frame() {
        record_macs(10);
        let ((), tally) = count_macs(|| {});
        assert_eq!(tally.total(), 0);
    }

    #[test]
    fn sections_and_nested_frames() {
        let ((), outer) = count_macs(|| {
            section("a", || {
                record_macs(3);
                section("b", || record_macs(4));
            });
            let ((), inner) = count_macs(|| section("c", || record_macs(5)));
            assert_eq!(inner.total(), 5);
        });
        assert_eq!(outer.total(), 12);
        assert_eq!(outer.under("a"), 7);
        assert_eq!(outer.under("a/b"), 4);
        assert_eq!(outer.under("c"), 5);
        assert_eq!(outer.under("ab"), 0);
    }

    #[test]
    fn report_totals_are_sums() {
        let r = ProfileReport::new(
            64,
            "deploy",
            vec![
                ModuleProfile {
                    name: "x".into(),
                    params: 3,
                    flops: 10,
                },
                ModuleProfile {
                    name: "y".into(),
                    params: 4,
                    flops: 20,
                },
            ],
        );
        assert_eq!(r.total_params, 7);
        assert_eq!(r.total_flops, 30);
        assert!(r.to_string().contains("FLOPs = 2 x MACs"));
    }
}
