use crate::error::Result;
use crate::types::Episode;

/// Random-access stream of episodes. Implementations must return the same
/// episode for the same index on every call.
pub trait EpisodeSource: Sync {
    fn len(&self) -> usize;

    fn episode(&self, index: usize) -> Result<Episode>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EpisodeSource for [Episode] {
    fn len(&self) -> usize {
        <[Episode]>::len(self)
    }

    fn episode(&self, index: usize) -> Result<Episode> {
        Ok(self[index].clone())
    }
}

impl EpisodeSource for Vec<Episode> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn episode(&self, index: usize) -> Result<Episode> {
        Ok(self[index].clone())
    }
}
