use std::collections::BTreeMap;

use crate::planner::PlannerConfig;
use crate::sop::SopAtlas;

use super::{BackendSelection, LogDocument, Session, SessionConfig, SessionError, SessionEvent, SessionInput};

/// Single-threaded session registry. Ids are `s-1`, `s-2`, ... in creation
/// order.
#[derive(Debug)]
pub struct Engine {
    atlas: SopAtlas,
    planner: PlannerConfig,
    default_backend: BackendSelection,
    sessions: BTreeMap<String, Session>,
    next_id: u64,
}

impl Engine {
    pub fn new(atlas: SopAtlas, planner: PlannerConfig) -> Self {
        Engine {
            atlas,
            planner,
            default_backend: BackendSelection::default(),
            sessions: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn bundled() -> Self {
        Self::new(SopAtlas::bundled(), PlannerConfig::bundled())
    }

    /// Backend used for configs that do not select one.
    pub fn with_default_backend(mut self, backend: BackendSelection) -> Self {
        self.default_backend = backend;
        self
    }

    pub fn atlas(&self) -> &SopAtlas {
        &self.atlas
    }

    pub fn planner(&self) -> &PlannerConfig {
        &self.planner
    }

    pub fn create_session(&mut self, mut config: SessionConfig) -> Result<String, SessionError> {
        if config.backend.is_none() {
            config.backend = Some(self.default_backend.clone());
        }
        let id = format!("s-{}", self.next_id);
        let session = Session::create(&id, config, &self.atlas, &self.planner)?;
        self.next_id += 1;
        self.sessions.insert(id.clone(), session);
        Ok(id)
    }

    pub fn session(&self, id: &str) -> Result<&Session, SessionError> {
        self.sessions
            .get(id)
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub fn session_mut(&mut self, id: &str) -> Result<&mut Session, SessionError> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub fn handle_event(
        &mut self,
        id: &str,
        input: SessionInput,
    ) -> Result<Vec<SessionEvent>, SessionError> {
        self.session_mut(id)?.handle(input)
    }

    pub fn export_log(&self, id: &str) -> Result<LogDocument, SessionError> {
        Ok(self.session(id)?.export_log())
    }

    /// Rebuild a session from its event stream under its original id.
    pub fn restore_session(&mut self, events: &[SessionEvent]) -> Result<String, SessionError> {
        let session = Session::restore(events, &self.atlas, &self.planner)?;
        let id = session.id().to_string();
        self.sessions.insert(id.clone(), session);
        Ok(id)
    }
}
