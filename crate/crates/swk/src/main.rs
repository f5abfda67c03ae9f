fn main() {
    // CLI driver; filled in once the pipeline lands.
}
