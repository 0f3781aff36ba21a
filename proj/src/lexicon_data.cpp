#include "dubalign/textfront.hpp"

namespace dubalign::text {

// Built-in data tables, kept in the same byte format as the on-disk files
// (data/lexicon.tsv, data/phonemes.txt) so the two can be diffed directly.

namespace {

const char* const kInventoryText =
    "AA\nAE\nAH\nAO\nAW\nAY\nB\nCH\nD\nDH\nEH\nER\nEY\nF\nG\nHH\nIH\nIY\nJH\nK\nL\nM\nN\nNG\n"
    "OW\nOY\nP\nR\nS\nSH\nT\nTH\nUH\nUW\nV\nW\nY\nZ\nZH\n_\n";

const char* const kLexiconText =
    "a\tAH\n"
    "again\tAH G EH N\n"
    "always\tAO L W EY Z\n"
    "an\tAE N\n"
    "and\tAE N D\n"
    "angry\tAE NG G R IY\n"
    "answer\tAE N S ER\n"
    "apple\tAE P AH L\n"
    "as\tAE Z\n"
    "ask\tAE S K\n"
    "at\tAE T\n"
    "autumn\tAO T AH M\n"
    "bear\tB EH R\n"
    "begin\tB IH G IH N\n"
    "big\tB IH G\n"
    "bird\tB ER D\n"
    "book\tB UH K\n"
    "brave\tB R EY V\n"
    "bread\tB R EH D\n"
    "bridge\tB R IH JH\n"
    "bright\tB R AY T\n"
    "bring\tB R IH NG\n"
    "brother\tB R AH DH ER\n"
    "by\tB AY\n"
    "calm\tK AA M\n"
    "came\tK EY M\n"
    "carry\tK AE R IY\n"
    "cat\tK AE T\n"
    "chair\tCH EH R\n"
    "child\tCH AY L D\n"
    "children\tCH IH L D R AH N\n"
    "city\tS IH T IY\n"
    "close\tK L OW Z\n"
    "cloud\tK L AW D\n"
    "cold\tK OW L D\n"
    "come\tK AH M\n"
    "cry\tK R AY\n"
    "dance\tD AE N S\n"
    "dark\tD AA R K\n"
    "day\tD EY\n"
    "dinner\tD IH N ER\n"
    "doctor\tD AA K T ER\n"
    "dog\tD AO G\n"
    "door\tD AO R\n"
    "down\tD AW N\n"
    "dream\tD R IY M\n"
    "earth\tER TH\n"
    "evening\tIY V N IH NG\n"
    "every\tEH V R IY\n"
    "family\tF AE M AH L IY\n"
    "far\tF AA R\n"
    "farmer\tF AA R M ER\n"
    "father\tF AA DH ER\n"
    "find\tF AY N D\n"
    "finish\tF IH N IH SH\n"
    "fire\tF AY ER\n"
    "fish\tF IH SH\n"
    "flower\tF L AW ER\n"
    "fly\tF L AY\n"
    "follow\tF AA L OW\n"
    "for\tF AO R\n"
    "forest\tF AO R AH S T\n"
    "forget\tF ER G EH T\n"
    "found\tF AW N D\n"
    "friend\tF R EH N D\n"
    "from\tF R AH M\n"
    "garden\tG AA R D AH N\n"
    "gave\tG EY V\n"
    "gentle\tJH EH N T AH L\n"
    "give\tG IH V\n"
    "go\tG OW\n"
    "good\tG UH D\n"
    "grass\tG R AE S\n"
    "great\tG R EY T\n"
    "happy\tHH AE P IY\n"
    "he\tHH IY\n"
    "hear\tHH IH R\n"
    "heard\tHH ER D\n"
    "help\tHH EH L P\n"
    "hold\tHH OW L D\n"
    "home\tHH OW M\n"
    "honey\tHH AH N IY\n"
    "horse\tHH AO R S\n"
    "house\tHH AW S\n"
    "i\tAY\n"
    "in\tIH N\n"
    "is\tIH Z\n"
    "island\tAY L AH N D\n"
    "it\tIH T\n"
    "jump\tJH AH M P\n"
    "keep\tK IY P\n"
    "kind\tK AY N D\n"
    "king\tK IH NG\n"
    "know\tN OW\n"
    "laugh\tL AE F\n"
    "lead\tL IY D\n"
    "leaf\tL IY F\n"
    "learn\tL ER N\n"
    "letter\tL EH T ER\n"
    "light\tL AY T\n"
    "lion\tL AY AH N\n"
    "listen\tL IH S AH N\n"
    "little\tL IH T AH L\n"
    "long\tL AO NG\n"
    "look\tL UH K\n"
    "loud\tL AW D\n"
    "made\tM EY D\n"
    "make\tM EY K\n"
    "man\tM AE N\n"
    "many\tM EH N IY\n"
    "meet\tM IY T\n"
    "milk\tM IH L K\n"
    "moon\tM UW N\n"
    "morning\tM AO R N IH NG\n"
    "mother\tM AH DH ER\n"
    "mountain\tM AW N T AH N\n"
    "mouse\tM AW S\n"
    "music\tM Y UW Z IH K\n"
    "name\tN EY M\n"
    "near\tN IH R\n"
    "never\tN EH V ER\n"
    "new\tN UW\n"
    "night\tN AY T\n"
    "ocean\tOW SH AH N\n"
    "of\tAH V\n"
    "old\tOW L D\n"
    "on\tAA N\n"
    "open\tOW P AH N\n"
    "out\tAW T\n"
    "over\tOW V ER\n"
    "people\tP IY P AH L\n"
    "play\tP L EY\n"
    "queen\tK W IY N\n"
    "quick\tK W IH K\n"
    "quiet\tK W AY AH T\n"
    "rain\tR EY N\n"
    "ran\tR AE N\n"
    "read\tR IY D\n"
    "remember\tR IH M EH M B ER\n"
    "rest\tR EH S T\n"
    "return\tR IH T ER N\n"
    "river\tR IH V ER\n"
    "road\tR OW D\n"
    "run\tR AH N\n"
    "sad\tS AE D\n"
    "sailor\tS EY L ER\n"
    "saw\tS AO\n"
    "see\tS IY\n"
    "she\tSH IY\n"
    "short\tSH AO R T\n"
    "shout\tSH AW T\n"
    "sing\tS IH NG\n"
    "sister\tS IH S T ER\n"
    "sky\tS K AY\n"
    "sleep\tS L IY P\n"
    "slow\tS L OW\n"
    "small\tS M AO L\n"
    "smile\tS M AY L\n"
    "snow\tS N OW\n"
    "some\tS AH M\n"
    "song\tS AO NG\n"
    "soon\tS UW N\n"
    "speak\tS P IY K\n"
    "spring\tS P R IH NG\n"
    "star\tS T AA R\n"
    "stone\tS T OW N\n"
    "storm\tS T AO R M\n"
    "story\tS T AO R IY\n"
    "summer\tS AH M ER\n"
    "sun\tS AH N\n"
    "swim\tS W IH M\n"
    "table\tT EY B AH L\n"
    "take\tT EY K\n"
    "talk\tT AO K\n"
    "tall\tT AO L\n"
    "teacher\tT IY CH ER\n"
    "tell\tT EH L\n"
    "thank\tTH AE NG K\n"
    "the\tDH AH\n"
    "they\tDH EY\n"
    "think\tTH IH NG K\n"
    "tiger\tT AY G ER\n"
    "to\tT UW\n"
    "today\tT AH D EY\n"
    "together\tT AH G EH DH ER\n"
    "told\tT OW L D\n"
    "tomorrow\tT AH M AA R OW\n"
    "took\tT UH K\n"
    "town\tT AW N\n"
    "travel\tT R AE V AH L\n"
    "tree\tT R IY\n"
    "under\tAH N D ER\n"
    "up\tAH P\n"
    "village\tV IH L AH JH\n"
    "visit\tV IH Z IH T\n"
    "voice\tV OY S\n"
    "wait\tW EY T\n"
    "walk\tW AO K\n"
    "walked\tW AO K T\n"
    "warm\tW AO R M\n"
    "was\tW AA Z\n"
    "watch\tW AA CH\n"
    "water\tW AO T ER\n"
    "we\tW IY\n"
    "went\tW EH N T\n"
    "whisper\tW IH S P ER\n"
    "wind\tW IH N D\n"
    "window\tW IH N D OW\n"
    "winter\tW IH N T ER\n"
    "wise\tW AY Z\n"
    "with\tW IH DH\n"
    "wolf\tW UH L F\n"
    "woman\tW UH M AH N\n"
    "word\tW ER D\n"
    "work\tW ER K\n"
    "write\tR AY T\n"
    "yesterday\tY EH S T ER D EY\n"
    "you\tY UW\n"
    "young\tY AH NG\n";

}  // namespace

std::string_view builtin_lexicon_text() { return kLexiconText; }
std::string_view builtin_inventory_text() { return kInventoryText; }

const std::map<char, std::vector<std::string>>& letter_sounds() {
    // Per-letter fallback for out-of-lexicon words: primary letter sound for
    // consonants and vowels, spelled-out names where no lone sound exists.
    static const std::map<char, std::vector<std::string>> table = {
        {'a', {"AE"}},
        {'b', {"B"}},
        {'c', {"K"}},
        {'d', {"D"}},
        {'e', {"EH"}},
        {'f', {"F"}},
        {'g', {"G"}},
        {'h', {"HH"}},
        {'i', {"IH"}},
        {'j', {"JH"}},
        {'k', {"K"}},
        {'l', {"L"}},
        {'m', {"M"}},
        {'n', {"N"}},
        {'o', {"AA"}},
        {'p', {"P"}},
        {'q', {"K", "Y", "UW"}},
        {'r', {"R"}},
        {'s', {"S"}},
        {'t', {"T"}},
        {'u', {"AH"}},
        {'v', {"V"}},
        {'w', {"W"}},
        {'x', {"K", "S"}},
        {'y', {"Y"}},
        {'z', {"Z"}},
        {'0', {"Z", "IH", "R", "OW"}},
        {'1', {"W", "AH", "N"}},
        {'2', {"T", "UW"}},
        {'3', {"TH", "R", "IY"}},
        {'4', {"F", "AO", "R"}},
        {'5', {"F", "AY", "V"}},
        {'6', {"S", "IH", "K", "S"}},
        {'7', {"S", "EH", "V", "AH", "N"}},
        {'8', {"EY", "T"}},
        {'9', {"N", "AY", "N"}},
    };
    return table;
}

}  // namespace dubalign::text
