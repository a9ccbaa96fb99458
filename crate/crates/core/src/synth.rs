//! Seeded synthetic corpora: a small memorization set and a
//! copy-from-KB question answering task.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kb::KnowledgeBase;
use crate::text::{ActionCall, Dialog, Turn};

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Unique made-up words that cannot collide with template words.
fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).expect("nonempty"));
            w.push_str(VOWELS.choose(rng).expect("nonempty"));
        }
        if rng.random_bool(0.5) {
            w.push_str(["n", "r", "s", "x"].choose(rng).expect("nonempty"));
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];
const FOODS: &[&str] = &["italian", "chinese", "indian", "french", "thai", "korean"];

const PRICES: &[&str] = &["cheap", "moderate", "expensive"];

/// Two-turn booking dialogs for memorization checks. Yields
/// `2 * dialogs` assistant turns. Opening requests are distinct for up to
/// 90 dialogs and repeat beyond that.
pub fn booking_dialogs(dialogs: usize, seed: u64) -> Vec<Dialog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let names = pseudo_words(&mut rng, dialogs, &mut taken);
    let refs = pseudo_words(&mut rng, dialogs, &mut taken);
    let mut requests: Vec<(&str, &str, &str)> = PRICES
        .iter()
        .flat_map(|p| FOODS.iter().flat_map(move |f| AREAS.iter().map(move |a| (*p, *f, *a))))
        .collect();
    requests.shuffle(&mut rng);
    (0..dialogs)
        .map(|i| {
            let (price, food, area) = requests[i % requests.len()];
            let day = DAYS.choose(&mut rng).expect("nonempty");
            let people = rng.random_range(1..=8);
            let hour = rng.random_range(11..=21);
            let time = format!("{hour}:{}", ["00", "15", "30", "45"].choose(&mut rng).expect("nonempty"));
            let find = ActionCall::new(
                "restaurant-find",
                vec![
                    ("price".into(), price.to_string()),
                    ("food".into(), food.to_string()),
                    ("area".into(), area.to_string()),
                ],
            )
            .expect("valid");
            let book = ActionCall::new(
                "restaurant-book",
                vec![
                    ("people".into(), people.to_string()),
                    ("time".into(), time.clone()),
                    ("day".into(), day.to_string()),
                ],
            )
            .expect("valid");
            Dialog {
                id: format!("booking-{i}"),
                turns: vec![
                    Turn::user(format!("i want {price} {food} food in the {area} please")),
                    Turn::assistant(format!("{} is a nice {food} place in the {area} . shall i book it ?", names[i]), Some(find)),
                    Turn::user(format!("yes for {people} people at {time} on {day}")),
                    Turn::assistant(format!("booked for {day} at {time} . your reference is {} .", refs[i]), Some(book)),
                ],
            }
        })
        .collect()
}

pub const RELATIONS: &[&str] = &["area", "food", "price", "phone", "owner"];

/// Copy-from-KB task: every answer requires looking up one triple.
pub struct GroundingTask {
    pub kb: KnowledgeBase,
    pub train: Vec<Dialog>,
    /// Questions about (subject, relation) pairs never asked in training.
    pub test: Vec<Dialog>,
}

/// `subjects x RELATIONS` triples with relation-specific value pools.
/// Each subject contributes one held-out relation to the test split.
pub fn grounding_task(subjects: usize, pool: usize, seed: u64) -> GroundingTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: HashSet<String> = RELATIONS.iter().map(|s| s.to_string()).collect();
    let names = pseudo_words(&mut rng, subjects, &mut taken);
    let pools: Vec<Vec<String>> = RELATIONS.iter().map(|_| pseudo_words(&mut rng, pool, &mut taken)).collect();
    let mut rows = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (si, subj) in names.iter().enumerate() {
        let held = rng.random_range(0..RELATIONS.len());
        for (ri, rel) in RELATIONS.iter().enumerate() {
            let value = pools[ri].choose(&mut rng).expect("nonempty").clone();
            rows.push([subj.clone(), rel.to_string(), value.clone()]);
            let mut answer = Turn::assistant(format!("the {rel} is {value} ."), None);
            answer.relevant = vec![[subj.clone(), rel.to_string(), value]];
            let dialog = Dialog {
                id: format!("q-{si}-{rel}"),
                turns: vec![Turn::user(format!("what is the {rel} of {subj} ?")), answer],
            };
            if ri == held {
                test.push(dialog);
            } else {
                train.push(dialog);
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let (kb, _) = KnowledgeBase::from_rows(rows).expect("well-formed rows");
    GroundingTask { kb, train, test }
}
