fn main() {
    println!("dermml");
}
