//! Multi-step action caching.
//!
//! An action chosen by the policy is reused for `N` consecutive draft/verify
//! steps. The step counter resets when it reaches `N` and at turn boundaries.

use crate::error::{Error, Result};

/// One cache lookup: the value, whether the source was queried, and the
/// cache step after this lookup.
pub fn cached_action<T: Clone>(
    cache: &mut Option<T>,
    cache_step: usize,
    interval: usize,
    query: impl FnOnce() -> Result<T>,
) -> Result<(T, bool, usize)> {
    if interval == 0 || cache_step > interval {
        return Err(Error::Contract(format!(
            "cache step {cache_step} outside [0, {interval}]"
        )));
    }
    match cache {
        Some(v) if cache_step != 0 && cache_step < interval => Ok((v.clone(), false, cache_step + 1)),
        _ => {
            let v = query()?;
            *cache = Some(v.clone());
            Ok((v, true, 1))
        }
    }
}

/// Stateful wrapper around [`cached_action`].
#[derive(Debug, Clone)]
pub struct ActionCache<T> {
    interval: usize,
    step: usize,
    cached: Option<T>,
    invocations: usize,
}

impl<T: Clone> ActionCache<T> {
    pub fn new(interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::Config("cache interval must be >= 1".into()));
        }
        Ok(Self {
            interval,
            step: 0,
            cached: None,
            invocations: 0,
        })
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    /// Steps already served by the current cached value.
    pub fn cache_step(&self) -> usize {
        self.step
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }

    /// True when the next lookup will query the source.
    pub fn needs_query(&self) -> bool {
        self.cached.is_none() || self.step == 0 || self.step >= self.interval
    }

    /// Forgets the cached value; the next lookup queries the source.
    pub fn reset(&mut self) {
        self.step = 0;
        self.cached = None;
    }

    pub fn get(&mut self, query: impl FnOnce() -> Result<T>) -> Result<(T, bool)> {
        if self.step >= self.interval {
            self.step = 0;
        }
        let (v, invoked, step) = cached_action(&mut self.cached, self.step, self.interval, query)?;
        self.step = step;
        if invoked {
            self.invocations += 1;
        }
        Ok((v, invoked))
    }
}
