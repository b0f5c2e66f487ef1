use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::synthworld::Entity;

pub type NameMap = BTreeMap<u32, String>;

pub const NAME_WORDLIST: &[&str] = &[
    "Alice", "Bruno", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Iris", "Jonas",
    "Kira", "Leon", "Mila", "Nico", "Olga", "Pablo", "Quinn", "Rosa", "Sven", "Tara", "Umar",
    "Vera", "Wanda", "Xavi", "Yara", "Zane", "Amara", "Basil", "Celia", "Dario", "Edith", "Fabio",
    "Gemma", "Hamid", "Ines", "Jasper", "Kenji", "Lena", "Marco", "Nadia", "Oscar", "Petra",
    "Rafael", "Selma", "Tobias", "Ursula", "Viktor", "Willa", "Yusuf", "Zelda", "Anika", "Boris",
    "Chloe", "Dante", "Elif", "Farah", "Gideon", "Hana", "Ivan", "Juno", "Kofi", "Lucia", "Mateo",
    "Noor", "Otto", "Priya", "Ruben", "Sofia", "Theo", "Uma", "Valentin", "Wren", "Ximena",
    "Yosef", "Zora", "Arlo", "Bianca", "Cyrus", "Daphne", "Emil", "Freya", "Gustav", "Helga",
    "Idris", "Jolene", "Kasper", "Leila", "Magnus", "Nell", "Orla", "Piet", "Rhea", "Silas",
    "Thea", "Ulla", "Vito", "Wendell", "Yvette", "Zeno", "Alma", "Bodhi", "Cosima", "Dorian",
    "Esme", "Florin", "Gaia", "Henrik", "Isla", "Joaquin", "Katya", "Lorenzo", "Maren", "Nikolai",
    "Odette", "Pascal", "Romy", "Stellan", "Tilda", "Ulrich", "Vesna", "Wolfgang", "Yelena",
    "Zoltan", "Anouk", "Benedikt", "Carmen", "Desmond", "Elio",
];

/// Assigns each entity a distinct name drawn from the bundled wordlist.
pub fn assign_names(entities: &[Entity], seed: u64) -> Result<NameMap> {
    if entities.is_empty() {
        return Err(Error::Empty("entities"));
    }
    if entities.len() > NAME_WORDLIST.len() {
        return Err(Error::NamesExhausted {
            needed: entities.len(),
            available: NAME_WORDLIST.len(),
        });
    }
    let mut pool: Vec<&str> = NAME_WORDLIST.to_vec();
    pool.shuffle(&mut seed::rng_at(seed, &[0x4e41_4d45]));
    Ok(entities
        .iter()
        .zip(pool)
        .map(|(e, n)| (e.entity_id, n.to_string()))
        .collect())
}
