//! In-process fabric. Every publish is fanned out under one lock, visiting
//! subscribers in a fixed order, so a run's message sequence depends only on
//! the order in which participants publish.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{ChurnControl, Endpoint, Role, Topic, TransportError};

#[derive(Default)]
struct Inbox {
    messages: VecDeque<(Topic, Vec<u8>)>,
    reconnected: bool,
    disconnected: bool,
}

#[derive(Default)]
struct Mailbox {
    inbox: Mutex<Inbox>,
    ready: Condvar,
}

impl Mailbox {
    fn lock(&self) -> MutexGuard<'_, Inbox> {
        self.inbox.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Default)]
struct Registry {
    /// Keyed by (role, id): the server sorts first.
    endpoints: BTreeMap<(Role, u16), Arc<Mailbox>>,
    dropped: BTreeSet<u16>,
    closed: bool,
}

/// Shared handle to one loopback fabric; clones refer to the same fabric.
#[derive(Clone, Default)]
pub struct Fabric {
    registry: Arc<Mutex<Registry>>,
}

impl Fabric {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers an endpoint. Ids are unique per role; there is one server.
    pub fn connect(&self, role: Role, id: u16) -> Result<LoopbackEndpoint, TransportError> {
        let mut reg = self.lock();
        if reg.closed {
            return Err(TransportError::Closed);
        }
        let key = (role, id);
        if reg.endpoints.contains_key(&key) {
            return Err(match role {
                Role::Server => TransportError::DuplicateServer,
                Role::Client => TransportError::DuplicateId(id),
            });
        }
        if role == Role::Server && reg.endpoints.keys().any(|(r, _)| *r == Role::Server) {
            return Err(TransportError::DuplicateServer);
        }
        let mailbox = Arc::new(Mailbox::default());
        reg.endpoints.insert(key, mailbox.clone());
        Ok(LoopbackEndpoint {
            fabric: self.clone(),
            role,
            id,
            mailbox,
        })
    }

    pub fn connect_server(&self) -> Result<LoopbackEndpoint, TransportError> {
        self.connect(Role::Server, 0)
    }

    pub fn connect_client(&self, id: u16) -> Result<LoopbackEndpoint, TransportError> {
        self.connect(Role::Client, id)
    }

    /// Wakes every endpoint; subsequent receives on empty inboxes fail with
    /// [`TransportError::Closed`].
    pub fn close(&self) {
        let mut reg = self.lock();
        reg.closed = true;
        for mailbox in reg.endpoints.values() {
            let _guard = mailbox.lock();
            mailbox.ready.notify_all();
        }
    }

    pub fn is_dropped(&self, client_id: u16) -> bool {
        self.lock().dropped.contains(&client_id)
    }

    fn deliver(
        &self,
        from: (Role, u16),
        topic: Topic,
        payload: &[u8],
    ) -> Result<(), TransportError> {
        let reg = self.lock();
        if reg.closed {
            return Err(TransportError::Closed);
        }
        if !reg.endpoints.contains_key(&from) {
            return Err(TransportError::Disconnected);
        }
        if from.0 == Role::Client && reg.dropped.contains(&from.1) {
            return Ok(());
        }
        for ((role, id), mailbox) in &reg.endpoints {
            if !role.subscriptions().contains(&topic) {
                continue;
            }
            if *role == Role::Client && reg.dropped.contains(id) {
                continue;
            }
            let mut inbox = mailbox.lock();
            inbox.messages.push_back((topic, payload.to_vec()));
            mailbox.ready.notify_all();
        }
        Ok(())
    }

    fn client_mailbox(reg: &Registry, client_id: u16) -> Result<Arc<Mailbox>, TransportError> {
        reg.endpoints
            .get(&(Role::Client, client_id))
            .cloned()
            .ok_or(TransportError::UnknownClient(client_id))
    }

    fn remove(&self, key: (Role, u16)) {
        self.lock().endpoints.remove(&key);
    }
}

impl ChurnControl for Fabric {
    /// Cuts the client off and discards anything still queued for it.
    fn drop_client(&self, client_id: u16) -> Result<(), TransportError> {
        let mut reg = self.lock();
        let mailbox = Self::client_mailbox(&reg, client_id)?;
        reg.dropped.insert(client_id);
        let mut inbox = mailbox.lock();
        inbox.messages.clear();
        inbox.reconnected = false;
        Ok(())
    }

    fn restore_client(&self, client_id: u16) -> Result<(), TransportError> {
        let mut reg = self.lock();
        let mailbox = Self::client_mailbox(&reg, client_id)?;
        if reg.dropped.remove(&client_id) {
            let mut inbox = mailbox.lock();
            inbox.reconnected = true;
            mailbox.ready.notify_all();
        }
        Ok(())
    }
}

pub struct LoopbackEndpoint {
    fabric: Fabric,
    role: Role,
    id: u16,
    mailbox: Arc<Mailbox>,
}

impl LoopbackEndpoint {
    /// Leaves the fabric; further publishes fail.
    pub fn disconnect(&mut self) {
        self.fabric.remove((self.role, self.id));
        self.mailbox.lock().disconnected = true;
    }

    pub fn pending(&self) -> usize {
        self.mailbox.lock().messages.len()
    }
}

impl Drop for LoopbackEndpoint {
    fn drop(&mut self) {
        self.fabric.remove((self.role, self.id));
    }
}

impl Endpoint for LoopbackEndpoint {
    fn role(&self) -> Role {
        self.role
    }

    fn id(&self) -> u16 {
        self.id
    }

    fn publish(&mut self, topic: Topic, payload: &[u8]) -> Result<(), TransportError> {
        if self.mailbox.lock().disconnected {
            return Err(TransportError::Disconnected);
        }
        self.fabric.deliver((self.role, self.id), topic, payload)
    }

    fn receive(&mut self, timeout: Duration) -> Result<Option<(Topic, Vec<u8>)>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut inbox = self.mailbox.lock();
        loop {
            if let Some(msg) = inbox.messages.pop_front() {
                return Ok(Some(msg));
            }
            if inbox.disconnected {
                return Err(TransportError::Disconnected);
            }
            if inbox.reconnected {
                // Let the owner notice the reconnect before waiting again.
                return Ok(None);
            }
            drop(inbox);
            if self.fabric.lock().closed {
                return Err(TransportError::Closed);
            }
            inbox = self.mailbox.lock();
            if !inbox.messages.is_empty() || inbox.reconnected {
                continue;
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let (guard, _) = self
                .mailbox
                .ready
                .wait_timeout(inbox, deadline - now)
                .unwrap_or_else(|e| e.into_inner());
            inbox = guard;
        }
    }

    fn take_reconnected(&mut self) -> bool {
        std::mem::take(&mut self.mailbox.lock().reconnected)
    }
}
