//! Records the discrete choices made by piecewise ops (rectifier signs,
//! max-pool winners) so a finite-difference check can tell when its stencil
//! straddles a kink.

use std::cell::RefCell;

thread_local! {
    static TRACE: RefCell<Option<Vec<usize>>> = const { RefCell::new(None) };
}

pub(crate) fn recording() -> bool {
    TRACE.with(|t| t.borrow().is_some())
}

pub(crate) fn record(choices: impl IntoIterator<Item = usize>) {
    TRACE.with(|t| {
        if let Some(v) = t.borrow_mut().as_mut() {
            v.extend(choices);
        }
    });
}

/// Runs `f` and returns its result with every choice recorded meanwhile.
pub(crate) fn traced<T>(f: impl FnOnce() -> T) -> (T, Vec<usize>) {
    let outer = TRACE.with(|t| t.borrow_mut().replace(Vec::new()));
    let out = f();
    let choices = TRACE.with(|t| std::mem::replace(&mut *t.borrow_mut(), outer)).unwrap_or_default();
    (out, choices)
}
