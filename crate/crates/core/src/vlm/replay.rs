use super::{BackendError, BackendKind, BackendReply, CacheKey, ChatBackend, ChatRequest, FixtureArchive};

/// Serves responses from a recorded fixture archive; never touches the network.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    archive: FixtureArchive,
}

impl ReplayBackend {
    pub fn new(archive: FixtureArchive) -> Self {
        Self { archive }
    }

    pub fn archive(&self) -> &FixtureArchive {
        &self.archive
    }
}

impl ChatBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn send(&self, request: &ChatRequest, key: &CacheKey) -> Result<BackendReply, BackendError> {
        self.archive
            .get(key.digest())
            .map(|r| BackendReply {
                text: r.text.clone(),
                timestamp: r.timestamp.clone(),
            })
            .ok_or_else(|| BackendError::ReplayMiss {
                tag: request.request_tag.clone(),
                digest: key.digest().to_string(),
            })
    }
}
