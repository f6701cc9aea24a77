//! Raw file and one-sided operations. Neither has failure semantics: calling
//! one while any member of the communicator is crashed traps the whole run.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{CommError, Communicator};
use crate::simnet::ProcessId;

impl Communicator {
    async fn guard_raw(&self, what: &str) {
        if self.has_crashed_member() {
            self.ctx().trap(format!("{what} on faulty communicator {}", self.cid()));
            core::future::pending::<()>().await;
        }
    }

    /// Collective write: each rank writes `data` at `offset` in file `name`.
    pub async fn file_write_at_all(&self, name: &str, offset: usize, data: &[u8]) -> Result<(), CommError> {
        self.guard_raw("file write").await;
        if self.is_revoked() {
            return Err(CommError::Revoked);
        }
        self.ctx().store_write(name, offset, data);
        Ok(())
    }

    pub async fn file_read_at_all(&self, name: &str, offset: usize, len: usize) -> Result<Vec<u8>, CommError> {
        self.guard_raw("file read").await;
        if self.is_revoked() {
            return Err(CommError::Revoked);
        }
        Ok(self.ctx().store_read(name, offset, len))
    }

    /// Collective creation of window `name`, exposing `size` bytes per rank.
    /// Regions belong to processes, not to the communicator, so a window
    /// can be attached again to a repaired communicator.
    pub async fn win_create(&self, name: &str, size: usize) -> Result<Window, CommError> {
        self.guard_raw("window create").await;
        if self.is_revoked() {
            return Err(CommError::Revoked);
        }
        let win = Window::attach(self, name, size);
        let region = win.region(self.me());
        if self.ctx().store_len(&region).is_none() {
            self.ctx().store_write(&region, 0, &alloc::vec![0; size]);
        }
        Ok(win)
    }
}

/// Handle on a window over a communicator.
#[derive(Clone, Debug)]
pub struct Window {
    comm: Communicator,
    name: String,
    size: usize,
}

impl Window {
    pub fn attach(comm: &Communicator, name: &str, size: usize) -> Self {
        Window { comm: comm.clone(), name: String::from(name), size }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    fn region(&self, owner: ProcessId) -> String {
        format!("win:{}:{}", self.name, owner)
    }

    fn check(&self, offset: usize, len: usize) -> Result<(), CommError> {
        if offset + len > self.size {
            Err(CommError::InvalidArgument("window access out of bounds"))
        } else {
            Ok(())
        }
    }

    pub async fn put(&self, target: usize, offset: usize, data: &[u8]) -> Result<(), CommError> {
        self.check(offset, data.len())?;
        let owner = self.comm.member(target)?;
        self.comm.guard_raw("window put").await;
        self.comm.ctx().store_write(&self.region(owner), offset, data);
        Ok(())
    }

    pub async fn get(&self, target: usize, offset: usize, len: usize) -> Result<Vec<u8>, CommError> {
        self.check(offset, len)?;
        let owner = self.comm.member(target)?;
        self.comm.guard_raw("window get").await;
        Ok(self.comm.ctx().store_read(&self.region(owner), offset, len))
    }

    /// Synchronizes all ranks of the window.
    pub async fn fence(&self) -> Result<(), CommError> {
        self.comm.guard_raw("window fence").await;
        self.comm.barrier_raw().await
    }

    /// The caller's own exposed region.
    pub fn local(&self) -> Vec<u8> {
        self.comm.ctx().store_read(&self.region(self.comm.me()), 0, self.size)
    }
}
