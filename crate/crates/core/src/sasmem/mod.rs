//! Single-address-space memory: power-of-two service regions carved from one
//! arena, plus a model of address-translation cost.

mod buddy;
mod translate;

pub use buddy::{AllocError, BucketCensus, BuddyAllocator, Region, MIN_REGION_CLASS, MIN_REGION_SIZE};
pub use translate::{
    simulate_translation, TranslationError, TranslationMode, TranslationStats, TRANSLATION_CSV_HEADER,
};
