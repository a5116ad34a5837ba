//! Built-in word list so corpus generation needs no external files.

/// 200 lowercase English words, lengths 2 through 10.
pub const WORDS: [&str; 200] = [
    "go", "in", "on", "up", "we", "an", "at", "it", "my", "no",
    "air", "bag", "bar", "bed", "box", "bus", "car", "cat", "cup", "dog",
    "ear", "egg", "eye", "fan", "fig", "fox", "gym", "hat", "ice", "jam",
    "key", "leg", "map", "net", "oak", "pen", "pig", "rat", "sea", "sun",
    "tea", "van", "web", "zoo", "arch", "band", "bank", "barn", "bell", "bird",
    "blue", "boat", "bone", "book", "cake", "calm", "card", "cave", "city", "coal",
    "coin", "cold", "corn", "dark", "dawn", "deer", "desk", "door", "dust", "farm",
    "fire", "fish", "flag", "fork", "gate", "gold", "hall", "hand", "hill", "iron",
    "jazz", "kite", "lake", "lamp", "leaf", "lion", "milk", "moon", "nest", "park",
    "rain", "ring", "road", "rock", "roof", "rope", "sand", "ship", "shoe", "snow",
    "song", "star", "tree", "wall", "wind", "wolf", "apple", "beach", "bread", "brick",
    "broom", "chair", "chalk", "cloud", "coast", "crane", "cream", "crown", "dance", "eagle",
    "earth", "field", "flame", "fruit", "glass", "grape", "grass", "green", "horse", "house",
    "light", "lemon", "maple", "mouse", "night", "ocean", "piano", "plant", "quilt", "river",
    "sharp", "sheep", "shelf", "smile", "stone", "storm", "sugar", "table", "tiger", "torch",
    "train", "water", "wheat", "bridge", "butter", "camera", "candle", "castle", "cherry", "circle",
    "copper", "corner", "cotton", "dragon", "flower", "forest", "garden", "guitar", "hammer", "island",
    "jungle", "kettle", "ladder", "lantern", "marble", "meadow", "mirror", "orange", "pepper", "pillow",
    "rabbit", "ribbon", "saddle", "silver", "spring", "stream", "sunset", "temple", "thunder", "turtle",
    "valley", "velvet", "village", "vulture", "walnut", "whistle", "windmill", "lighthouse", "strawberry", "watermelon",
];

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn word_list_shape() {
        assert_eq!(WORDS.len(), 200);
        let unique: HashSet<&&str> = WORDS.iter().collect();
        assert_eq!(unique.len(), 200, "duplicate lexicon words");
        for w in WORDS {
            assert!((2..=10).contains(&w.len()), "{w} has length {}", w.len());
            assert!(w.chars().all(|c| c.is_ascii_lowercase()), "{w} not lowercase ascii");
        }
    }
}
