use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding concurrent outbound requests.
#[derive(Debug)]
pub(crate) struct InFlightLimit {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct Permit<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub(crate) fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit { limit: self }
    }

    #[cfg(test)]
    fn active(&self) -> usize {
        *self.active.lock().unwrap()
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.limit.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.limit.freed.notify_one();
    }
}
